"""Attentive pooling and the scalar-ratio flow predictor."""

import numpy as np
import pytest

from cosynorm import autodiff as ad
from cosynorm.autodiff import SGD, Tensor
from cosynorm.decoder import SpeakerEmbedding
from cosynorm.duration import (AttentivePool, DurationPredictor,
                               DurationPredictorConfig, DurationRatio,
                               clamp_ratio, duration_cfm_loss, predict_ratio)
from cosynorm.flow import SamplerConfig
from cosynorm.seeding import derive_rng


def tiny_predictor(rng, dtype=np.float64, **kw):
    base = dict(content_dim=6, model_dim=8, n_layers=1, n_heads=2,
                time_emb_dim=8, speaker_dim=4, ffn_dim=8)
    base.update(kw)
    return DurationPredictor(DurationPredictorConfig(**base), rng, dtype=dtype)


class TestAttentivePool:
    def test_identical_frames_returned(self):
        rng = derive_rng(0, "pool")
        pool = AttentivePool("p", 5, rng, np.float64)
        frame = rng.standard_normal(5)
        out = pool(Tensor(np.tile(frame, (7, 1))))
        np.testing.assert_allclose(out.data, frame, atol=1e-12)

    def test_zero_scores_give_mean(self):
        rng = derive_rng(1, "pool")
        pool = AttentivePool("p", 5, rng, np.float64)
        pool.score.w.data = np.zeros_like(pool.score.w.data)
        pool.score.b.data = np.zeros_like(pool.score.b.data)
        frames = rng.standard_normal((6, 5))
        out = pool(Tensor(frames))
        np.testing.assert_allclose(out.data, frames.mean(axis=0), atol=1e-12)

    def test_permutation_invariant(self):
        rng = derive_rng(2, "pool")
        pool = AttentivePool("p", 4, rng, np.float64)
        frames = rng.standard_normal((8, 4))
        base = pool(Tensor(frames)).data
        perm = rng.permutation(8)
        shuffled = pool(Tensor(frames[perm])).data
        np.testing.assert_allclose(base, shuffled, atol=1e-6)

    def test_output_in_convex_hull(self):
        rng = derive_rng(3, "pool")
        pool = AttentivePool("p", 4, rng, np.float64)
        for _ in range(10):
            frames = rng.standard_normal((5, 4))
            out = pool(Tensor(frames)).data
            assert np.all(out <= frames.max(axis=0) + 1e-9)
            assert np.all(out >= frames.min(axis=0) - 1e-9)

    def test_empty_input_rejected(self):
        pool = AttentivePool("p", 4, derive_rng(4, "pool"), np.float64)
        with pytest.raises(ValueError):
            pool(Tensor(np.zeros((0, 4))))


class TestDurationLoss:
    def test_oracle_predictor_zero_loss(self):
        rng = derive_rng(5, "dur")
        content = rng.standard_normal((4, 6))
        r_true = 0.77
        drawn = {}

        class Capture:
            def standard_normal(self, shape=None):
                drawn["r0"] = 0.4
                return drawn["r0"]

            def uniform(self):
                return 0.5

        class Oracle:
            dtype = np.float64

            def __call__(self, r_t, t, c, s):
                return Tensor(np.asarray(r_true - drawn["r0"]))

        loss = duration_cfm_loss(Oracle(), DurationRatio(r_true), content, None, Capture())
        assert float(loss.data) == 0.0

    def test_zero_predictor_squared_error(self):
        class Fixed:
            def standard_normal(self, shape=None):
                return -0.3

            def uniform(self):
                return 0.25

        class Zero:
            dtype = np.float64

            def __call__(self, r_t, t, c, s):
                return Tensor(np.asarray(0.0))

        loss = duration_cfm_loss(Zero(), DurationRatio(0.8), None, None, Fixed())
        assert abs(float(loss.data) - (0.8 - (-0.3)) ** 2) < 1e-12

    def test_gradient(self):
        rng = derive_rng(6, "dur")
        pred = tiny_predictor(rng)
        content = rng.standard_normal((3, 6))
        spk = SpeakerEmbedding(rng.standard_normal(4), "s")

        class Fixed:
            def standard_normal(self, shape=None):
                return 0.41

            def uniform(self):
                return 0.63

        def f():
            return duration_cfm_loss(pred, DurationRatio(0.77),
                                     Tensor(content.copy()), spk, Fixed())

        assert ad.finite_diff_check(f, list(pred.parameters().values())) < 1e-4


class TestPredictRatio:
    def test_deterministic_given_seed(self):
        rng = derive_rng(7, "dur")
        pred = tiny_predictor(rng)
        content = Tensor(rng.standard_normal((5, 6)))
        spk = SpeakerEmbedding(rng.standard_normal(4), "s")
        cfg = SamplerConfig(n_steps=8, seed=123)
        a = predict_ratio(pred, Tensor(content.data.copy()), spk, cfg)
        b = predict_ratio(pred, Tensor(content.data.copy()), spk, cfg)
        assert a.value == b.value

    def test_clamping(self):
        assert clamp_ratio(-0.2) == 0.1
        assert clamp_ratio(55.0) == 10.0
        assert clamp_ratio(0.75) == 0.75

    def test_ratio_semantics_anchor(self):
        # a ratio of 0.75 maps an 8-frame input to a 6-frame target
        assert int(round(0.75 * 8)) == 6

    def test_positive_ratio_enforced(self):
        with pytest.raises(ValueError):
            DurationRatio(0.0)

    def test_integrated_ratio_always_in_range(self):
        rng = derive_rng(8, "dur")
        pred = tiny_predictor(rng, dtype=np.float32)
        spk = SpeakerEmbedding(rng.standard_normal(4), "s")
        for seed in range(5):
            content = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
            r = predict_ratio(pred, content, spk, SamplerConfig(n_steps=4, seed=seed))
            assert 0.1 <= r.value <= 10.0


def _fit_predictor(pred, make_item, rng, steps=700, batch=8, lr=0.01):
    """Mini-batched scalar-flow fitting; single-draw SGD at this scale is
    too noisy for the plain-momentum optimizer."""
    opt = SGD(pred.parameters(), lr=lr, momentum=0.9)
    for _ in range(steps):
        losses = []
        for _ in range(batch):
            ratio, content, speaker = make_item()
            losses.append(duration_cfm_loss(pred, ratio, content, speaker, rng))
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        total = ad.mul(total, 1.0 / batch)
        opt.zero_grad()
        total.backward()
        opt.step()


def test_predictor_learns_constant_ratio():
    """Flow matching on a constant scalar target concentrates samples there."""
    rng = derive_rng(9, "durlearn")
    pred = tiny_predictor(rng, dtype=np.float64)
    spk = SpeakerEmbedding(rng.standard_normal(4), "s")
    target = 1.0 / 1.3

    def make_item():
        return DurationRatio(target), Tensor(rng.standard_normal((4, 6))), spk

    _fit_predictor(pred, make_item, rng, steps=900)
    samples = [predict_ratio(pred, Tensor(rng.standard_normal((4, 6))), spk,
                             SamplerConfig(32, seed)).value for seed in range(20)]
    assert abs(np.mean(samples) - target) < 0.05


def test_speaker_conditioned_ratio_separation():
    """Two speaker clusters with ratios 0.7 / 0.9 separate after training."""
    rng = derive_rng(10, "durcluster")
    pred = tiny_predictor(rng, dtype=np.float64)
    speakers = [SpeakerEmbedding(derive_rng(11, "spk", i).standard_normal(4), f"s{i}")
                for i in range(4)]
    ratio_of = {i: (0.7 if i < 2 else 0.9) for i in range(4)}

    def make_item():
        i = int(rng.integers(4))
        return (DurationRatio(ratio_of[i]), Tensor(rng.standard_normal((4, 6))),
                speakers[i])

    _fit_predictor(pred, make_item, rng, steps=700)
    means = {}
    for i in (0, 3):
        vals = [predict_ratio(pred, Tensor(rng.standard_normal((4, 6))),
                              speakers[i], SamplerConfig(32, seed)).value
                for seed in range(12)]
        means[i] = np.mean(vals)
    assert means[3] - means[0] >= 0.1
