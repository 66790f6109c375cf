"""Shared network primitives: rotary positions, attention, AdaLN, embeddings.

These are the building blocks reused by the speech encoder, the velocity
decoder and the duration predictor. Positions are real-valued everywhere;
angle tables are computed in float64 and cast to the working dtype.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Module, Tensor

ROPE_BASE = 10000.0


def rope_tables(positions, head_dim: int, dtype, base: float = ROPE_BASE):
    """cos/sin tables of shape (L, head_dim/2) for real-valued positions."""
    if head_dim % 2 != 0:
        raise ConfigurationError("rotary encoding requires an even head dimension")
    if base <= 1.0:
        raise ConfigurationError("rotary base must exceed 1")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotate channel pairs of (..., L, d) vectors by position-scaled angles."""
    cos, sin = rope_tables(positions, x.shape[-1], x.dtype, base=base)
    return ad.rope_rotate(x, cos, sin)


def attention(queries: Tensor, keys: Tensor, values: Tensor,
              q_positions, k_positions, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with rotary q/k positions.

    queries: (Lq, D); keys/values: (Lk, D). Returns (Lq, D), heads
    re-concatenated. No input/output projections; callers own those.
    """
    lq, dim = queries.shape
    lk = keys.shape[0]
    if lk == 0:
        raise ValueError("attention requires at least one key")
    if keys.shape[0] != values.shape[0]:
        raise ValueError("key and value sequences must have equal length")
    if dim % n_heads != 0:
        raise ConfigurationError("model dim must be divisible by n_heads")
    dh = dim // n_heads
    if dh % 2 != 0:
        raise ConfigurationError("head dimension must be even for rotary encoding")

    def heads(x, length):
        return ad.swapaxes(ad.reshape(x, (length, n_heads, dh)), 0, 1)

    qh = apply_rope(heads(queries, lq), q_positions)
    kh = apply_rope(heads(keys, lk), k_positions)
    vh = heads(values, lk)
    logits = ad.mul(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    weights = ad.softmax(logits, axis=-1)
    out = ad.matmul(weights, vh)
    return ad.reshape(ad.swapaxes(out, 0, 1), (lq, dim))


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng, dtype,
                 zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = (rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(dtype)
        self.w = self.register(f"{name}.w", w)
        self.b = self.register(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class AffineLayerNorm(Module):
    """Layer norm with learned gain and bias (encoder pre-norm blocks)."""

    def __init__(self, name: str, dim: int, dtype):
        super().__init__()
        self.g = self.register(f"{name}.g", np.ones(dim, dtype=dtype))
        self.b = self.register(f"{name}.b", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self.g), self.b)


class TimeEmbedding:
    """A scalar time in [0, 1] with its learned embedding vector."""

    __slots__ = ("t", "embedding")

    def __init__(self, t: float, embedding: Tensor):
        self.t = t
        self.embedding = embedding


class TimeEmbedder(Module):
    """Sinusoidal features of t followed by a two-layer MLP."""

    def __init__(self, name: str, dim: int, rng, dtype, max_period: float = 10000.0):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigurationError("time embedding dim must be even")
        self.dim = dim
        half = dim // 2
        self.freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
        self.fc1 = self.add_child("fc1", Linear(f"{name}.fc1", dim, dim, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(f"{name}.fc2", dim, dim, rng, dtype))
        self.dtype = dtype

    def __call__(self, t: float) -> TimeEmbedding:
        args = t * self.freqs
        feats = np.concatenate([np.cos(args), np.sin(args)]).astype(self.dtype)
        h = self.fc2(ad.silu(self.fc1(Tensor(feats))))
        return TimeEmbedding(t, h)


class AdaLNBlock(Module):
    """Residual sublayer gated and modulated by the time embedding.

    out = x + gate(t) * f(LN(x) * (1 + scale(t)) + shift(t)), with the
    modulation projection zero-initialized so the block is the identity at
    initialization.
    """

    def __init__(self, name: str, dim: int, time_dim: int, rng, dtype):
        super().__init__()
        self.dim = dim
        self.mod = self.add_child(
            "mod", Linear(f"{name}.mod", time_dim, 3 * dim, rng, dtype, zero_init=True))

    def __call__(self, x: Tensor, time_emb: TimeEmbedding, sublayer) -> Tensor:
        m = self.mod(time_emb.embedding)
        scale = ad.narrow(m, 0, 0, self.dim)
        shift = ad.narrow(m, 0, self.dim, self.dim)
        gate = ad.narrow(m, 0, 2 * self.dim, self.dim)
        h = ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)
        return ad.add(x, ad.mul(gate, sublayer(h)))


class FeedForward(Module):
    def __init__(self, name: str, dim: int, hidden: int, rng, dtype):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(f"{name}.fc1", dim, hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(f"{name}.fc2", hidden, dim, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.silu(self.fc1(x)))


class MultiHeadProjections(Module):
    """Q/K/V/output projections around the positional attention core."""

    def __init__(self, name: str, q_dim: int, kv_dim: int, model_dim: int,
                 n_heads: int, rng, dtype):
        super().__init__()
        self.n_heads = n_heads
        self.wq = self.add_child("wq", Linear(f"{name}.wq", q_dim, model_dim, rng, dtype))
        self.wk = self.add_child("wk", Linear(f"{name}.wk", kv_dim, model_dim, rng, dtype))
        self.wv = self.add_child("wv", Linear(f"{name}.wv", kv_dim, model_dim, rng, dtype))
        self.wo = self.add_child("wo", Linear(f"{name}.wo", model_dim, model_dim, rng, dtype))

    def __call__(self, q_in: Tensor, kv_in: Tensor, q_positions, k_positions) -> Tensor:
        out = attention(self.wq(q_in), self.wk(kv_in), self.wv(kv_in),
                        q_positions, k_positions, self.n_heads)
        return self.wo(out)
