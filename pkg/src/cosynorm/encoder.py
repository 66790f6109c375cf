"""Speech encoder: strided-convolution frontend, pre-norm transformer body,
and the linear CTC projection head used for the auxiliary content loss.

The frontend is a trainable stand-in for a pretrained feature extractor and
sits behind the same interface, so a fixed frontend could be substituted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Module, Tensor
from .layers import AffineLayerNorm, FeedForward, Linear, MultiHeadProjections


@dataclass
class EncoderConfig:
    input_dim: int = 8
    model_dim: int = 32
    n_layers: int = 1
    n_heads: int = 2
    frontend_stride: int = 2
    vocab_size: int = 8
    ffn_dim: int = 64
    conv_kernel: int = 3

    def validate(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigurationError("model_dim must be divisible by n_heads")
        if (self.model_dim // self.n_heads) % 2 != 0:
            raise ConfigurationError("head dim must be even for rotary positions")
        if self.frontend_stride < 1:
            raise ConfigurationError("frontend_stride must be >= 1")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2 (blank + symbols)")
        return self


class ContentFeatures:
    """Encoder output sequence plus the pre-downsampling frame count."""

    __slots__ = ("frames", "source_len")

    def __init__(self, frames: Tensor, source_len: int):
        self.frames = frames
        self.source_len = source_len

    def __len__(self):
        return self.frames.shape[0]


class _EncoderBlock(Module):
    def __init__(self, name: str, cfg: EncoderConfig, rng, dtype):
        super().__init__()
        self.ln1 = self.add_child("ln1", AffineLayerNorm(f"{name}.ln1", cfg.model_dim, dtype))
        self.attn = self.add_child("attn", MultiHeadProjections(
            f"{name}.attn", cfg.model_dim, cfg.model_dim, cfg.model_dim, cfg.n_heads, rng, dtype))
        self.ln2 = self.add_child("ln2", AffineLayerNorm(f"{name}.ln2", cfg.model_dim, dtype))
        self.ffn = self.add_child("ffn", FeedForward(f"{name}.ffn", cfg.model_dim, cfg.ffn_dim, rng, dtype))

    def __call__(self, x: Tensor, positions) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, positions, positions))
        return ad.add(x, self.ffn(self.ln2(x)))


class SpeechEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        k = cfg.conv_kernel
        scale1 = 1.0 / np.sqrt(k * cfg.input_dim)
        scale2 = 1.0 / np.sqrt(k * cfg.model_dim)
        self.conv1_w = self.register(
            "frontend.conv1.w", (rng.standard_normal((k * cfg.input_dim, cfg.model_dim)) * scale1).astype(dtype))
        self.conv1_b = self.register("frontend.conv1.b", np.zeros(cfg.model_dim, dtype=dtype))
        self.conv2_w = self.register(
            "frontend.conv2.w", (rng.standard_normal((k * cfg.model_dim, cfg.model_dim)) * scale2).astype(dtype))
        self.conv2_b = self.register("frontend.conv2.b", np.zeros(cfg.model_dim, dtype=dtype))
        self.blocks = [
            self.add_child(f"block{i}", _EncoderBlock(f"block{i}", cfg, rng, dtype))
            for i in range(cfg.n_layers)
        ]
        self.ln_out = self.add_child("ln_out", AffineLayerNorm("ln_out", cfg.model_dim, dtype))
        self.head = self.add_child("head", Linear("head", cfg.model_dim, cfg.vocab_size, rng, dtype))

    def frontend_encode(self, features: Tensor) -> Tensor:
        """Downsample a (T, input_dim) sequence to (ceil(T/stride), model_dim)."""
        h = ad.silu(ad.conv1d(features, self.conv1_w, self.conv1_b, stride=self.cfg.frontend_stride))
        return ad.silu(ad.conv1d(h, self.conv2_w, self.conv2_b, stride=1))

    def encode(self, features) -> ContentFeatures:
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.dtype))
        source_len = features.shape[0]
        h = self.frontend_encode(features)
        positions = np.arange(h.shape[0], dtype=np.float64)
        for block in self.blocks:
            h = block(h, positions)
        return ContentFeatures(self.ln_out(h), source_len)

    def ctc_head(self, content: ContentFeatures) -> Tensor:
        """Per-frame log-probabilities over the vocabulary (rows normalized)."""
        return ad.log_softmax(self.head(content.frames), axis=1)
