"""Total-duration-ratio predictor.

A small time-modulated transformer reads the content features with the
noisy scalar ratio broadcast onto every frame, pools them attentively into
one vector, appends the speaker embedding, and projects to a scalar
velocity. Trained by flow matching on the scalar ratio; inference
integrates from noise and clamps the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Module, Tensor, no_grad
from .decoder import SpeakerEmbedding
from .encoder import ContentFeatures
from .flow import SamplerConfig
from .layers import AdaLNBlock, FeedForward, Linear, MultiHeadProjections, TimeEmbedder

RATIO_MIN = 0.1
RATIO_MAX = 10.0


@dataclass
class DurationRatio:
    """Target frames divided by source frames; clamped to [0.1, 10]."""

    value: float

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("duration ratio must be positive")


def clamp_ratio(value: float) -> float:
    return float(min(max(value, RATIO_MIN), RATIO_MAX))


@dataclass
class DurationPredictorConfig:
    content_dim: int = 32
    model_dim: int = 16
    n_layers: int = 1
    n_heads: int = 2
    time_emb_dim: int = 16
    speaker_dim: int = 8
    ffn_dim: int = 32
    use_speaker: bool = True

    def validate(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigurationError("model_dim must be divisible by n_heads")
        if (self.model_dim // self.n_heads) % 2 != 0:
            raise ConfigurationError("head dim must be even for rotary positions")
        return self


class AttentivePool(Module):
    """Softmax-weighted average of a frame sequence into a single vector."""

    def __init__(self, name: str, dim: int, rng, dtype):
        super().__init__()
        self.score = self.add_child("score", Linear(f"{name}.score", dim, 1, rng, dtype))

    def __call__(self, frames: Tensor) -> Tensor:
        if frames.shape[0] < 1:
            raise ValueError("attentive pooling requires at least one frame")
        weights = ad.softmax(self.score(frames), axis=0)
        return ad.reshape(ad.matmul(ad.swapaxes(weights, 0, 1), frames), (frames.shape[1],))


class DurationPredictor(Module):
    def __init__(self, cfg: DurationPredictorConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.in_proj = self.add_child("in_proj", Linear(
            "in_proj", cfg.content_dim + 1, cfg.model_dim, rng, dtype))
        self.time_embed = self.add_child("time", TimeEmbedder(
            "time", cfg.time_emb_dim, rng, dtype))
        self.attn = [
            self.add_child(f"attn{i}", MultiHeadProjections(
                f"attn{i}", cfg.model_dim, cfg.model_dim, cfg.model_dim, cfg.n_heads, rng, dtype))
            for i in range(cfg.n_layers)
        ]
        self.ffn = [
            self.add_child(f"ffn{i}", FeedForward(f"ffn{i}", cfg.model_dim, cfg.ffn_dim, rng, dtype))
            for i in range(cfg.n_layers)
        ]
        self.ada_attn = [
            self.add_child(f"ada_attn{i}", AdaLNBlock(
                f"ada_attn{i}", cfg.model_dim, cfg.time_emb_dim, rng, dtype))
            for i in range(cfg.n_layers)
        ]
        self.ada_ffn = [
            self.add_child(f"ada_ffn{i}", AdaLNBlock(
                f"ada_ffn{i}", cfg.model_dim, cfg.time_emb_dim, rng, dtype))
            for i in range(cfg.n_layers)
        ]
        self.pool = self.add_child("pool", AttentivePool("pool", cfg.model_dim, rng, dtype))
        self.null_speaker = self.register(
            "null_speaker", (rng.standard_normal(cfg.speaker_dim) * 0.1).astype(dtype))
        self.out_proj = self.add_child("out_proj", Linear(
            "out_proj", cfg.model_dim + cfg.speaker_dim, 1, rng, dtype))

    def _speaker_vector(self, speaker) -> Tensor:
        if speaker is None or not self.cfg.use_speaker:
            return self.null_speaker
        vec = speaker.vector if isinstance(speaker, SpeakerEmbedding) else speaker
        return Tensor(np.asarray(vec, dtype=self.dtype))

    def forward(self, r_t: float, t: float, content, speaker) -> Tensor:
        """Scalar velocity of the noisy ratio at flow time ``t``."""
        frames = content.frames if isinstance(content, ContentFeatures) else content
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=self.dtype))
        n = frames.shape[0]
        r_col = ad.expand(Tensor(np.asarray([[r_t]], dtype=self.dtype)), (n, 1))
        h = self.in_proj(ad.concat([frames, r_col], axis=1))
        time_emb = self.time_embed(t)
        pos = np.arange(n, dtype=np.float64)
        for attn, ffn, ada_a, ada_f in zip(self.attn, self.ffn, self.ada_attn, self.ada_ffn):
            h = ada_a(h, time_emb, lambda u: attn(u, u, pos, pos))
            h = ada_f(h, time_emb, lambda u: ffn(u))
        pooled = self.pool(h)
        joined = ad.concat([pooled, self._speaker_vector(speaker)], axis=0)
        return ad.reshape(self.out_proj(joined), ())

    __call__ = forward


def duration_cfm_loss(predictor: DurationPredictor, true_ratio: DurationRatio,
                      content, speaker, rng) -> Tensor:
    """Scalar flow matching: squared error against the path velocity."""
    r_true = true_ratio.value if isinstance(true_ratio, DurationRatio) else float(true_ratio)
    r0 = float(rng.standard_normal())
    t = float(rng.uniform())
    r_t = (1.0 - t) * r0 + t * r_true
    v = predictor(r_t, t, content, speaker)
    return ad.square(ad.sub(v, np.asarray(r_true - r0, dtype=v.dtype)))


def predict_ratio(predictor: DurationPredictor, content, speaker,
                  cfg: SamplerConfig) -> DurationRatio:
    """Euler-integrate the scalar ratio from seeded noise, then clamp."""
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    r = float(rng.standard_normal())
    dt = 1.0 / cfg.n_steps
    with no_grad():
        for k in range(cfg.n_steps):
            t = k / cfg.n_steps
            r += dt * float(predictor(r, t, content, speaker).data)
    return DurationRatio(clamp_ratio(r))
