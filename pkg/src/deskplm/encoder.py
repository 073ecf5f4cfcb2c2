"""Configurable bidirectional transformer encoder at toy scale.

Covers a plain ESM2-style shape (learned positions, LayerNorm, GELU MLP,
global attention) and a ProteinBERT2-style shape (RoPE, RMSNorm, SwiGLU,
depthwise-separable conv stem, alternating local/global attention).

forward is read-only over the parameters, so concurrent forwards over a
shared frozen parameter set are safe; training mutates parameters from a
single writer.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, DataError, NonFiniteError
from .gradcore import Tensor
from .seqdata import TokenBatch

NEG_INF = -1e9  # additive mask value; exp underflows to exactly 0
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    n_layers: int = 2
    hidden_size: int = 64
    n_heads: int = 4
    ffn_kind: str = "gelu_mlp"  # gelu_mlp | swiglu
    norm_kind: str = "layer_norm"  # layer_norm | rms_norm
    position_kind: str = "learned"  # learned | rope
    attention_pattern: str = "global"  # global | alternating_local_global
    local_window: int = 256
    conv_stem_layers: int = 0
    conv_kernel_size: int = 5
    max_len: int = 512
    vocab_size: int = 30
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def validate(self) -> "EncoderConfig":
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.position_kind == "rope" and (self.hidden_size // self.n_heads) % 2 != 0:
            raise ConfigError("rope requires an even per-head dimension")
        if self.ffn_kind not in ("gelu_mlp", "swiglu"):
            raise ConfigError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.norm_kind not in ("layer_norm", "rms_norm"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.position_kind not in ("learned", "rope"):
            raise ConfigError(f"unknown position_kind {self.position_kind!r}")
        if self.attention_pattern not in ("global", "alternating_local_global"):
            raise ConfigError(f"unknown attention_pattern {self.attention_pattern!r}")
        if self.attention_pattern == "alternating_local_global" and self.local_window <= 0:
            raise ConfigError("local attention needs a positive window")
        if self.conv_stem_layers < 0 or self.conv_kernel_size % 2 == 0:
            raise ConfigError("conv stem needs non-negative layers and an odd kernel size")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def esm2_style(cls, n_layers=2, hidden_size=64, n_heads=4, max_len=512, vocab_size=30) -> "EncoderConfig":
        return cls(n_layers=n_layers, hidden_size=hidden_size, n_heads=n_heads, max_len=max_len, vocab_size=vocab_size).validate()

    @classmethod
    def proteinbert2_style(cls, n_layers=2, hidden_size=64, n_heads=4, local_window=256, max_len=512, vocab_size=30) -> "EncoderConfig":
        return cls(
            n_layers=n_layers,
            hidden_size=hidden_size,
            n_heads=n_heads,
            ffn_kind="swiglu",
            norm_kind="rms_norm",
            position_kind="rope",
            attention_pattern="alternating_local_global",
            local_window=local_window,
            conv_stem_layers=3,
            max_len=max_len,
            vocab_size=vocab_size,
        ).validate()


def swiglu_width(hidden_size: int, expansion: float = 8.0 / 3.0) -> int:
    return int(np.ceil(hidden_size * expansion))


class EncoderParams:
    """Named parameter tensors; count is a pure function of the config."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, dtype: str = "float64") -> "EncoderParams":
        config.validate()
        rng = np.random.default_rng(seed)
        dt = np.dtype(dtype)
        h = config.hidden_size
        tensors: dict[str, Tensor] = {}

        def param(name, shape, std=INIT_STD):
            tensors[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True, op=name)

        def gain(name, size):
            tensors[name] = Tensor(np.ones(size, dtype=dt), requires_grad=True, op=name)

        param("tok_emb", (config.vocab_size, h))
        if config.position_kind == "learned":
            param("pos_emb", (config.max_len, h))
        for s in range(config.conv_stem_layers):
            param(f"stem.{s}.depthwise", (config.conv_kernel_size, h))
            param(f"stem.{s}.pointwise", (h, h))
        for i in range(config.n_layers):
            gain(f"layers.{i}.attn_norm_gain", h)
            for w in ("wq", "wk", "wv", "wo"):
                param(f"layers.{i}.{w}", (h, h))
            gain(f"layers.{i}.ffn_norm_gain", h)
            if config.ffn_kind == "gelu_mlp":
                param(f"layers.{i}.ffn_w1", (h, 4 * h))
                param(f"layers.{i}.ffn_w2", (4 * h, h))
            else:
                m = swiglu_width(h)
                param(f"layers.{i}.ffn_gate", (h, m))
                param(f"layers.{i}.ffn_up", (h, m))
                param(f"layers.{i}.ffn_down", (m, h))
        gain("final_norm_gain", h)
        return cls(config, tensors)

    def named_tensors(self):
        yield from self.tensors.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def rope_cos_sin(positions: np.ndarray, head_dim: int, base: float, dtype=np.float64):
    """Rotation tables for rotary position encoding, rotate-half convention."""
    positions = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = positions[:, None] * inv_freq[None, :]  # (L, half)
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(dtype)
    return cos, sin


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate per-position query/key features: x*cos + rotate_half(x)*sin."""
    return gc.add(gc.mul(x, cos), gc.mul(gc.rotate_half(x), sin))


def _norm(x: Tensor, kind: str, eps: float, gain_tensor: Tensor) -> Tensor:
    normed = gc.layer_norm(x, eps) if kind == "layer_norm" else gc.rms_norm(x, eps)
    return gc.mul(normed, gain_tensor)


def _attention_bias(attention_mask: np.ndarray, local_window: int | None, dtype) -> np.ndarray:
    """(B, 1, L, L) additive bias: 0 where attendable, NEG_INF where not."""
    b, length = attention_mask.shape
    allowed = np.broadcast_to(attention_mask[:, None, None, :], (b, 1, length, length)).copy()
    if local_window is not None:
        offsets = np.abs(np.arange(length)[:, None] - np.arange(length)[None, :])
        allowed &= offsets[None, None, :, :] <= local_window
    bias = np.where(allowed, 0.0, NEG_INF).astype(dtype)
    return bias


def _layer_is_local(config: EncoderConfig, layer_index: int) -> bool:
    return config.attention_pattern == "alternating_local_global" and layer_index % 2 == 0


def forward(params: EncoderParams, batch: TokenBatch) -> Tensor:
    """Encode a batch to final hidden states (batch, length, hidden).

    PAD keys receive exactly zero attention weight, so outputs at real
    positions are independent of the PAD tail.
    """
    cfg = params.config
    if int(batch.ids.max()) >= cfg.vocab_size:
        raise DataError(f"token id {int(batch.ids.max())} out of range for vocab_size {cfg.vocab_size}")
    if batch.max_length > cfg.max_len:
        raise DataError(f"batch length {batch.max_length} exceeds max_len {cfg.max_len}")

    dtype = params["tok_emb"].values.dtype
    bsz, length = batch.ids.shape
    h = cfg.hidden_size
    n_heads = cfg.n_heads
    head_dim = h // n_heads
    real = batch.attention_mask.astype(dtype)[:, :, None]  # (B, L, 1)

    x = gc.embedding(params["tok_emb"], batch.ids)
    if cfg.position_kind == "learned":
        x = gc.add(x, params["pos_emb"].values[:length] if not params["pos_emb"].requires_grad else _rows(params["pos_emb"], length))

    for s in range(cfg.conv_stem_layers):
        try:
            masked = gc.mul(x, real)
            y = gc.depthwise_conv1d(masked, params[f"stem.{s}.depthwise"])
            y = gc.silu(gc.matmul(y, params[f"stem.{s}.pointwise"]))
            x = gc.add(x, y)
        except NonFiniteError as e:
            raise NonFiniteError(f"stem.{s}/{e.op}") from e

    if cfg.position_kind == "rope":
        cos, sin = rope_cos_sin(np.arange(length), head_dim, cfg.rope_base, dtype)
    bias_global = _attention_bias(batch.attention_mask, None, dtype)
    bias_local = None
    if cfg.attention_pattern == "alternating_local_global":
        bias_local = _attention_bias(batch.attention_mask, cfg.local_window, dtype)

    inv_scale = 1.0 / float(np.sqrt(head_dim))
    for i in range(cfg.n_layers):
        try:
            xn = _norm(x, cfg.norm_kind, cfg.norm_eps, params[f"layers.{i}.attn_norm_gain"])

            def heads(t: Tensor) -> Tensor:
                return gc.transpose(gc.reshape(t, (bsz, length, n_heads, head_dim)), (0, 2, 1, 3))

            q = heads(gc.matmul(xn, params[f"layers.{i}.wq"]))
            k = heads(gc.matmul(xn, params[f"layers.{i}.wk"]))
            v = heads(gc.matmul(xn, params[f"layers.{i}.wv"]))
            if cfg.position_kind == "rope":
                q = apply_rope(q, cos, sin)
                k = apply_rope(k, cos, sin)
            logits = gc.scale(gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))), inv_scale)
            bias = bias_local if _layer_is_local(cfg, i) else bias_global
            weights = gc.softmax(gc.add(logits, bias), axis=-1)
            ctx = gc.matmul(weights, v)
            ctx = gc.reshape(gc.transpose(ctx, (0, 2, 1, 3)), (bsz, length, h))
            x = gc.add(x, gc.matmul(ctx, params[f"layers.{i}.wo"]))

            xn2 = _norm(x, cfg.norm_kind, cfg.norm_eps, params[f"layers.{i}.ffn_norm_gain"])
            if cfg.ffn_kind == "gelu_mlp":
                f = gc.matmul(gc.gelu(gc.matmul(xn2, params[f"layers.{i}.ffn_w1"])), params[f"layers.{i}.ffn_w2"])
            else:
                gated = gc.mul(gc.silu(gc.matmul(xn2, params[f"layers.{i}.ffn_gate"])), gc.matmul(xn2, params[f"layers.{i}.ffn_up"]))
                f = gc.matmul(gated, params[f"layers.{i}.ffn_down"])
            x = gc.add(x, f)
        except NonFiniteError as e:
            raise NonFiniteError(f"layers.{i}/{e.op}") from e

    return _norm(x, cfg.norm_kind, cfg.norm_eps, params["final_norm_gain"])


def _rows(table: Tensor, n: int) -> Tensor:
    """First n rows of a 2D parameter, keeping gradient flow."""
    return gc.embedding(table, np.arange(n))


def mean_pool(hidden, pool_mask: np.ndarray, l2_normalize: bool = False) -> np.ndarray:
    """Mean over unmasked positions; optional unit L2 norm per row.

    hidden: (batch, length, hidden) Tensor or array. pool_mask: (batch,
    length) boolean, True for positions that feed the pool.
    """
    values = hidden.values if isinstance(hidden, Tensor) else np.asarray(hidden)
    mask = np.asarray(pool_mask)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DataError("mean_pool: a row has no unmasked positions")
    pooled = (values * mask[:, :, None]).sum(axis=1) / counts[:, None]
    if l2_normalize:
        norms = np.linalg.norm(pooled, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("mean_pool: cannot L2-normalize a zero embedding")
        pooled = pooled / norms
    return pooled
