"""Minimal reverse-mode autodiff over dense numpy arrays.

A dynamic tape: every op returns a new Tensor holding its value, the
parent tensors, and a closure that routes the incoming gradient to the
parents. backward() walks the tape in reverse topological order from a
scalar root. Gradients accumulate additively, so shared subgraphs are
handled correctly.

64-bit floats by default (gradient oracles need the headroom); 32-bit
tensors are produced by creating parameters in float32, and every op
preserves the dtype of its operands. Each op checks its output for
NaN/inf and raises NonFiniteError naming itself. A tape is confined to
one worker; there is no shared mutable state between graphs.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float64


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(op)


class Tensor:
    """Array node in the autodiff graph.

    values and grad always share a shape. grad reads as zeros until a
    backward pass reaches this node. op records which operation produced
    the node (provenance for error messages and debugging).
    """

    __slots__ = ("values", "requires_grad", "op", "_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, parents=(), backward=None, op="leaf"):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are wrapped at the operand's dtype
    # so float32 graphs are not silently promoted.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.array(g, dtype=t.values.dtype, copy=True)
    else:
        t._grad += g


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(values, op)
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward=backward, op=op)
    return Tensor(values, op=op)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise / arithmetic
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.values + b.values

    def backward(g):
        _accumulate(a, _sum_to_shape(g, a.values.shape))
        _accumulate(b, _sum_to_shape(g, b.values.shape))

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.values - b.values

    def backward(g):
        _accumulate(a, _sum_to_shape(g, a.values.shape))
        _accumulate(b, _sum_to_shape(-g, b.values.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.values * b.values

    def backward(g):
        _accumulate(a, _sum_to_shape(g * b.values, a.values.shape))
        _accumulate(b, _sum_to_shape(g * a.values, b.values.shape))

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.values / b.values

    def backward(g):
        _accumulate(a, _sum_to_shape(g / b.values, a.values.shape))
        _accumulate(b, _sum_to_shape(-g * a.values / (b.values * b.values), b.values.shape))

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.values, (a,), backward, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar without adding a constant node."""
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.values * s, (a,), backward, "scale")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.values**exponent

    def backward(g):
        _accumulate(a, g * exponent * a.values ** (exponent - 1.0))

    return _make(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def backward(g):
        _accumulate(a, g * out)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.values)

    def backward(g):
        _accumulate(a, g / a.values)

    return _make(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)

    def backward(g):
        _accumulate(a, g * 0.5 / out)

    return _make(out, (a,), backward, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU, differentiable through the composition."""
    inner = scale(add(a, scale(power(a, 3.0), 0.044715)), _GELU_C)
    return mul(scale(a, 0.5), add(tanh(inner), 1.0))


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------


def _restore_axes(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accumulate(a, _restore_axes(np.asarray(g), a.values.shape, axis, keepdims))

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.values.size if axis is None else a.values.shape[axis]
    out = a.values.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        _accumulate(a, _restore_axes(np.asarray(g), a.values.shape, axis, keepdims) / count)

    return _make(np.asarray(out), (a,), backward, "mean")


def variance(a: Tensor, axis, keepdims=False) -> Tensor:
    """Population variance along one axis (ddof=0)."""
    centered = sub(a, mean(a, axis=axis, keepdims=True))
    return mean(mul(centered, centered), axis=axis, keepdims=keepdims)


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * out
        _accumulate(a, gy - out * gy.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Gain-free layer normalization over the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    centered = sub(a, mean(a, axis=-1, keepdims=True))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


def rms_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Gain-free RMS normalization over the last axis: x / sqrt(mean(x^2)+eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ms = mean(mul(a, a), axis=-1, keepdims=True)
    return div(a, sqrt(add(ms, eps)))


# ----------------------------------------------------------------------
# structural ops
# ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)

    def backward(g):
        _accumulate(a, _sum_to_shape(np.matmul(g, b.values.swapaxes(-1, -2)), a.values.shape))
        _accumulate(b, _sum_to_shape(np.matmul(a.values.swapaxes(-1, -2), g), b.values.shape))

    return _make(out, (a, b), backward, "matmul")


def detach(a: Tensor) -> Tensor:
    """Same values, gradient flow severed."""
    return Tensor(a.values, requires_grad=False, op="detach")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.values.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.values.shape))

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.values.transpose(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(out, (a,), backward, "transpose")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...]]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.values.shape[0]})")
    out = table.values[ids]

    def backward(g):
        acc = np.zeros_like(table.values)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.values.shape[1]))
        _accumulate(table, acc)

    return _make(out, (table,), backward, "embedding")


def take_pairs(a: Tensor, idx0: np.ndarray, idx1: np.ndarray) -> Tensor:
    """Select a[idx0[i], idx1[i]] for each i along the first two axes."""
    idx0 = np.asarray(idx0)
    idx1 = np.asarray(idx1)
    out = a.values[idx0, idx1]

    def backward(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, (idx0, idx1), g)
        _accumulate(a, acc)

    return _make(out, (a,), backward, "take_pairs")


def rotate_half(a: Tensor) -> Tensor:
    """Map (..., [x1, x2]) -> (..., [-x2, x1]) over a halved last axis."""
    d = a.values.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rotate_half requires an even last axis, got {d}")
    h = d // 2
    out = np.concatenate([-a.values[..., h:], a.values[..., :h]], axis=-1)

    def backward(g):
        gx = np.concatenate([g[..., h:], -g[..., :h]], axis=-1)
        _accumulate(a, gx)

    return _make(out, (a,), backward, "rotate_half")


def depthwise_conv1d(a: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 1D convolution with zero padding, stride 1.

    a: (batch, length, channels); kernels: (width, channels), odd width.
    """
    k = kernels.values
    if k.ndim != 2 or k.shape[0] % 2 == 0:
        raise ShapeError(f"kernels must be (odd_width, channels), got {k.shape}")
    if a.values.ndim != 3 or a.values.shape[2] != k.shape[1]:
        raise ShapeError(f"input {a.shape} does not match kernels {k.shape}")
    width = k.shape[0]
    pad = width // 2
    length = a.values.shape[1]
    padded = np.pad(a.values, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(a.values)
    for j in range(width):
        out += padded[:, j : j + length, :] * k[j]

    def backward(g):
        gk = np.zeros_like(k)
        gp = np.zeros_like(padded)
        for j in range(width):
            gk[j] = (g * padded[:, j : j + length, :]).sum(axis=(0, 1))
            gp[:, j : j + length, :] += g * k[j]
        _accumulate(kernels, gk)
        _accumulate(a, gp[:, pad : pad + length, :])

    return _make(out, (a, kernels), backward, "depthwise_conv1d")


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar root."""
    if root.values.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.values.shape}")
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in seen and parent.requires_grad:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)

    root._grad = np.ones_like(root.values)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
