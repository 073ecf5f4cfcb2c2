"""Shared exception types and their CLI exit codes."""


class DeskplmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DeskplmError):
    """Invalid configuration: bad schema, bad flag combination, bad value."""

    exit_code = 2


class DataError(DeskplmError):
    """Unreadable or malformed input data."""

    exit_code = 3


class NumericalError(DeskplmError):
    """Non-finite values or other numerical failure during computation."""

    exit_code = 4


class ShapeError(NumericalError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(NumericalError):
    """An operation produced NaN or infinity.

    Carries the name of the offending operation so training-step errors
    can point at the responsible op or layer.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite output from op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
