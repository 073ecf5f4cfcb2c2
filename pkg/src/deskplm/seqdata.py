"""Amino-acid tokenization, corpus ingestion, MLM mask plans, batching."""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CANONICAL_AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
AMBIGUITY_CODES = "XBZUO"

PAD, MASK, CLS, EOS, UNK = "<pad>", "<mask>", "<cls>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, MASK, CLS, EOS, UNK)

ACTION_NONE, ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2, 3


class Vocabulary:
    """Single-character amino-acid vocabulary with dense ids.

    Layout: specials first (PAD at 0), then the 20 canonical residues,
    then ambiguity codes. Round-trip encode/decode is identity on
    canonical symbols; unknown characters encode to UNK.
    """

    def __init__(self):
        symbols = list(SPECIAL_TOKENS) + list(CANONICAL_AMINO_ACIDS) + list(AMBIGUITY_CODES)
        self._id_to_symbol = symbols
        self._symbol_to_id = {s: i for i, s in enumerate(symbols)}
        self.pad_id = self._symbol_to_id[PAD]
        self.mask_id = self._symbol_to_id[MASK]
        self.cls_id = self._symbol_to_id[CLS]
        self.eos_id = self._symbol_to_id[EOS]
        self.unk_id = self._symbol_to_id[UNK]
        first_canonical = len(SPECIAL_TOKENS)
        self.canonical_ids = np.arange(first_canonical, first_canonical + len(CANONICAL_AMINO_ACIDS))
        self._maskable = np.zeros(len(symbols), dtype=bool)
        for ch in CANONICAL_AMINO_ACIDS + AMBIGUITY_CODES:
            self._maskable[self._symbol_to_id[ch]] = True
        self._special = np.zeros(len(symbols), dtype=bool)
        self._special[: len(SPECIAL_TOKENS)] = True

    def __len__(self):
        return len(self._id_to_symbol)

    def encode_char(self, ch: str) -> int:
        return self._symbol_to_id.get(ch.upper(), self.unk_id)

    def symbol(self, token_id: int) -> str:
        return self._id_to_symbol[token_id]

    def decode(self, ids, skip_special: bool = True) -> str:
        out = []
        for i in ids:
            if skip_special and self._special[int(i)]:
                continue
            out.append(self._id_to_symbol[int(i)])
        return "".join(out)

    def is_special(self, ids) -> np.ndarray:
        return self._special[np.asarray(ids)]

    def is_maskable(self, ids) -> np.ndarray:
        """True for residue positions eligible for mask selection (no specials)."""
        return self._maskable[np.asarray(ids)]


def tokenize(sequence: str, vocab: Vocabulary, max_len: int | None = None, add_cls_eos: bool = False) -> np.ndarray:
    """Encode one sequence; truncation keeps the N-terminal prefix.

    With CLS/EOS framing the residue budget shrinks by two so the total
    length never exceeds max_len.
    """
    if not sequence:
        raise DataError("cannot tokenize an empty sequence")
    ids = [vocab.encode_char(c) for c in sequence]
    if max_len is not None:
        budget = max_len - 2 if add_cls_eos else max_len
        ids = ids[:budget]
    if add_cls_eos:
        ids = [vocab.cls_id] + ids + [vocab.eos_id]
    return np.asarray(ids, dtype=np.int64)


@dataclass
class TokenBatch:
    """Padded id grid plus masks; immutable once built."""

    ids: np.ndarray  # (batch, length) int64
    attention_mask: np.ndarray  # (batch, length) bool, True for real tokens
    lengths: np.ndarray  # (batch,) int64

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def max_length(self) -> int:
        return self.ids.shape[1]

    def n_real_tokens(self) -> int:
        return int(self.attention_mask.sum())

    def maskable(self, vocab: Vocabulary) -> np.ndarray:
        return self.attention_mask & vocab.is_maskable(self.ids)

    def pooling_mask(self, vocab: Vocabulary, include_special: bool = False) -> np.ndarray:
        if include_special:
            return self.attention_mask & (self.ids != vocab.pad_id)
        return self.attention_mask & ~vocab.is_special(self.ids)

    def with_ids(self, ids: np.ndarray) -> "TokenBatch":
        return TokenBatch(ids=ids, attention_mask=self.attention_mask, lengths=self.lengths)


def pad_batch(id_lists: list[np.ndarray], vocab: Vocabulary, max_len: int | None = None) -> TokenBatch:
    """Right-pad a list of id arrays into one grid."""
    if not id_lists:
        raise DataError("cannot build an empty batch")
    lengths = np.asarray([len(x) for x in id_lists], dtype=np.int64)
    width = int(lengths.max())
    if max_len is not None:
        width = min(width, max_len)
        lengths = np.minimum(lengths, max_len)
    ids = np.full((len(id_lists), width), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(id_lists), width), dtype=bool)
    for i, row in enumerate(id_lists):
        n = int(lengths[i])
        ids[i, :n] = row[:n]
        mask[i, :n] = True
    return TokenBatch(ids=ids, attention_mask=mask, lengths=lengths)


@dataclass
class MaskPlan:
    """Which positions were selected for MLM and how they were corrupted."""

    batch_index: np.ndarray  # (n_selected,)
    position: np.ndarray  # (n_selected,)
    action: np.ndarray  # (n_selected,) in {ACTION_MASK, ACTION_RANDOM, ACTION_KEEP}
    original_ids: np.ndarray  # (n_selected,)
    corrupted_ids: np.ndarray  # full (batch, length) grid
    no_selection: bool = False

    @property
    def n_selected(self) -> int:
        return len(self.batch_index)

    def position_set(self) -> set[tuple[int, int]]:
        return set(zip(self.batch_index.tolist(), self.position.tolist()))


def make_mask_plan(batch: TokenBatch, vocab: Vocabulary, mask_rate: float, seed) -> MaskPlan:
    """Independent per-position Bernoulli(mask_rate) selection, 80/10/10 actions.

    Only residue positions (non-PAD, non-special) are eligible. MASK
    writes the mask id, RANDOM a uniform canonical residue id, KEEP
    leaves the input unchanged. Deterministic given (batch, seed).
    """
    if not (0.0 < mask_rate < 1.0):
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    rng = np.random.default_rng(seed)
    eligible = batch.maskable(vocab)
    selected = (rng.random(batch.ids.shape) < mask_rate) & eligible
    rolls = rng.random(batch.ids.shape)
    random_ids = rng.integers(vocab.canonical_ids[0], vocab.canonical_ids[-1] + 1, size=batch.ids.shape)

    b_idx, p_idx = np.nonzero(selected)
    action = np.where(rolls < 0.8, ACTION_MASK, np.where(rolls < 0.9, ACTION_RANDOM, ACTION_KEEP))[b_idx, p_idx]
    original = batch.ids[b_idx, p_idx]

    corrupted = batch.ids.copy()
    corrupted[b_idx[action == ACTION_MASK], p_idx[action == ACTION_MASK]] = vocab.mask_id
    rand_sel = action == ACTION_RANDOM
    corrupted[b_idx[rand_sel], p_idx[rand_sel]] = random_ids[b_idx[rand_sel], p_idx[rand_sel]]

    return MaskPlan(
        batch_index=b_idx,
        position=p_idx,
        action=action,
        original_ids=original,
        corrupted_ids=corrupted,
        no_selection=len(b_idx) == 0,
    )


# ----------------------------------------------------------------------
# file ingestion
# ----------------------------------------------------------------------


def _open_text(path):
    if str(path).endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def ingest_fasta(path):
    """Stream (record_id, sequence) pairs from a FASTA file.

    Wrapped sequence lines are concatenated. Records with an empty
    sequence are counted as malformed and skipped; more than 10%
    malformed aborts with the count.
    """
    try:
        fh = _open_text(path)
    except OSError as e:
        raise DataError(f"cannot read FASTA file {path}: {e}") from e
    records = []
    malformed = 0
    with fh:
        name = None
        parts: list[str] = []
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith(">"):
                if name is not None:
                    seq = "".join(parts)
                    if seq:
                        records.append((name, seq))
                    else:
                        malformed += 1
                name = line[1:].strip()
                parts = []
            else:
                if name is None:
                    malformed += 1
                    continue
                parts.append(line.upper())
        if name is not None:
            seq = "".join(parts)
            if seq:
                records.append((name, seq))
            else:
                malformed += 1
    total = len(records) + malformed
    if total and malformed / total > 0.10:
        raise DataError(f"{malformed} of {total} FASTA records malformed in {path}")
    yield from records


@dataclass
class LabeledRecord:
    sequence: str
    label: float | str
    record_id: str = ""
    split: str | None = None
    extras: dict = field(default_factory=dict)


def ingest_labeled_csv(path):
    """Stream labeled records from a CSV with header columns sequence,label.

    Optional id and split columns are picked up when present; labels
    parse as float when numeric, otherwise stay strings. Malformed rows
    are counted and skipped; more than 10% malformed aborts.
    """
    try:
        fh = _open_text(path)
    except OSError as e:
        raise DataError(f"cannot read CSV file {path}: {e}") from e
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "sequence" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise DataError(f"CSV {path} must have header columns 'sequence' and 'label'")
        rows = []
        malformed = 0
        for i, row in enumerate(reader):
            seq = (row.get("sequence") or "").strip()
            raw_label = (row.get("label") or "").strip()
            if not seq or not raw_label:
                malformed += 1
                continue
            try:
                label: float | str = float(raw_label)
            except ValueError:
                label = raw_label
            rows.append(
                LabeledRecord(
                    sequence=seq,
                    label=label,
                    record_id=(row.get("id") or f"row{i:05d}").strip(),
                    split=(row.get("split") or "").strip() or None,
                )
            )
        total = len(rows) + malformed
        if total and malformed / total > 0.10:
            raise DataError(f"{malformed} of {total} CSV rows malformed in {path}")
    yield from rows
