"""Velocity-field decoder: a DiT-style stack of self-attention,
cross-attention over position-scaled content features, and feed-forward
sublayers, each wrapped in time-modulated AdaLN.

Cross-attention keys carry fractional rotary positions produced by
:func:`scale_positions`, which remaps source indices so the source endpoint
lands exactly on the target endpoint. The output projection is
zero-initialized, so the velocity is exactly zero at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Module, Tensor
from .encoder import ContentFeatures
from .layers import AdaLNBlock, FeedForward, Linear, MultiHeadProjections, TimeEmbedder


@dataclass
class DecoderConfig:
    feature_dim: int = 8
    model_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    time_emb_dim: int = 32
    speaker_dim: int = 8
    content_dim: int = 32
    ffn_dim: int = 64
    use_speaker: bool = True
    use_position_scaling: bool = True

    def validate(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigurationError("model_dim must be divisible by n_heads")
        if (self.model_dim // self.n_heads) % 2 != 0:
            raise ConfigurationError("head dim must be even for rotary positions")
        return self


@dataclass(frozen=True)
class ConditionMask:
    drop_content: bool = False
    drop_speaker: bool = False

    def __post_init__(self):
        if not self.drop_content and self.drop_speaker:
            raise ConfigurationError(
                "mask (keep content, drop speaker) is not a trained branch")


KEEP_ALL = ConditionMask(False, False)
DROP_ALL = ConditionMask(True, True)
DROP_CONTENT = ConditionMask(True, False)


class SpeakerEmbedding:
    """Unit-norm timbre vector tagged with its speaker id."""

    __slots__ = ("vector", "speaker_id")

    def __init__(self, vector, speaker_id: str):
        vector = np.asarray(vector, dtype=np.float64)
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise ValueError("speaker embedding must be nonzero")
        self.vector = vector / norm
        self.speaker_id = speaker_id


def scale_positions(src_len: int, tgt_len: int) -> np.ndarray:
    """Affine source positions whose endpoints match the target's endpoints.

    position_i = i * (tgt_len - 1) / (src_len - 1); a single source frame
    maps to the target midpoint.
    """
    if src_len < 1 or tgt_len < 1:
        raise ValueError("sequence lengths must be positive")
    if src_len == 1:
        return np.array([(tgt_len - 1) / 2.0])
    # multiply before dividing: i*(tgt-1) is an exact integer in float64,
    # so the endpoint division yields tgt-1 with no rounding slack
    idx = np.arange(src_len, dtype=np.float64)
    return (idx * float(tgt_len - 1)) / float(src_len - 1)


class _DecoderLayer(Module):
    def __init__(self, name: str, cfg: DecoderConfig, rng, dtype):
        super().__init__()
        d, t = cfg.model_dim, cfg.time_emb_dim
        self.self_attn = self.add_child("self_attn", MultiHeadProjections(
            f"{name}.self_attn", d, d, d, cfg.n_heads, rng, dtype))
        self.cross_attn = self.add_child("cross_attn", MultiHeadProjections(
            f"{name}.cross_attn", d, cfg.content_dim, d, cfg.n_heads, rng, dtype))
        self.ffn = self.add_child("ffn", FeedForward(f"{name}.ffn", d, cfg.ffn_dim, rng, dtype))
        self.ada_self = self.add_child("ada_self", AdaLNBlock(f"{name}.ada_self", d, t, rng, dtype))
        self.ada_cross = self.add_child("ada_cross", AdaLNBlock(f"{name}.ada_cross", d, t, rng, dtype))
        self.ada_ffn = self.add_child("ada_ffn", AdaLNBlock(f"{name}.ada_ffn", d, t, rng, dtype))

    def __call__(self, x, time_emb, content, q_pos, k_pos):
        x = self.ada_self(x, time_emb, lambda h: self.self_attn(h, h, q_pos, q_pos))
        x = self.ada_cross(x, time_emb, lambda h: self.cross_attn(h, content, q_pos, k_pos))
        return self.ada_ffn(x, time_emb, lambda h: self.ffn(h))


class VelocityDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.in_proj = self.add_child("in_proj", Linear(
            "in_proj", cfg.feature_dim, cfg.model_dim, rng, dtype))
        self.spk_proj = self.add_child("spk_proj", Linear(
            "spk_proj", cfg.speaker_dim, cfg.model_dim, rng, dtype))
        self.null_speaker = self.register(
            "null_speaker", (rng.standard_normal(cfg.speaker_dim) * 0.1).astype(dtype))
        self.null_content = self.register(
            "null_content", (rng.standard_normal((1, cfg.content_dim)) * 0.1).astype(dtype))
        self.time_embed = self.add_child("time", TimeEmbedder(
            "time", cfg.time_emb_dim, rng, dtype))
        self.layers = [
            self.add_child(f"layer{i}", _DecoderLayer(f"layer{i}", cfg, rng, dtype))
            for i in range(cfg.n_layers)
        ]
        self.out_proj = self.add_child("out_proj", Linear(
            "out_proj", cfg.model_dim, cfg.feature_dim, rng, dtype, zero_init=True))

    def _speaker_vector(self, speaker, mask: ConditionMask) -> Tensor:
        if mask.drop_speaker or not self.cfg.use_speaker or speaker is None:
            return self.null_speaker
        vec = speaker.vector if isinstance(speaker, SpeakerEmbedding) else speaker
        return Tensor(np.asarray(vec, dtype=self.dtype))

    def _content_frames(self, content, mask: ConditionMask):
        if mask.drop_content or content is None:
            return self.null_content, 1
        frames = content.frames if isinstance(content, ContentFeatures) else content
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=self.dtype))
        return frames, frames.shape[0]

    def key_positions(self, content_len: int, tgt_len: int) -> np.ndarray:
        if self.cfg.use_position_scaling:
            return scale_positions(content_len, tgt_len)
        return np.arange(content_len, dtype=np.float64)

    def forward(self, x_t, t: float, content, speaker,
                mask: ConditionMask = KEEP_ALL) -> Tensor:
        """Velocity estimate with the same shape as ``x_t``."""
        if not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t, dtype=self.dtype))
        if x_t.shape[1] != self.cfg.feature_dim:
            raise ConfigurationError(
                f"x_t feature dim {x_t.shape[1]} != configured {self.cfg.feature_dim}")
        tgt_len = x_t.shape[0]
        frames, content_len = self._content_frames(content, mask)
        if frames.shape[1] != self.cfg.content_dim:
            raise ConfigurationError(
                f"content dim {frames.shape[1]} != configured {self.cfg.content_dim}")
        spk = self._speaker_vector(speaker, mask)

        time_emb = self.time_embed(t)
        h = ad.add(self.in_proj(x_t), self.spk_proj(spk))
        q_pos = np.arange(tgt_len, dtype=np.float64)
        k_pos = self.key_positions(content_len, tgt_len)
        for layer in self.layers:
            h = layer(h, time_emb, frames, q_pos, k_pos)
        return self.out_proj(h)

    __call__ = forward
