"""Rotary positions, attention, AdaLN, and the time embedder."""

import numpy as np
import pytest

from cosynorm import autodiff as ad
from cosynorm.autodiff import ConfigurationError
from cosynorm.layers import (AdaLNBlock, FeedForward, Linear, TimeEmbedder,
                             apply_rope, attention, rope_tables)
from cosynorm.seeding import derive_rng


class TestRope:
    def test_position_zero_is_identity(self):
        rng = derive_rng(0, "rope0")
        x = ad.Tensor(rng.standard_normal((1, 8)))
        out = apply_rope(x, [0.0])
        np.testing.assert_array_equal(out.data, x.data)

    def test_rotation_preserves_norm(self):
        rng = derive_rng(1, "ropen")
        for _ in range(20):
            x = ad.Tensor(rng.standard_normal((4, 8)))
            pos = rng.uniform(0, 500, 4)
            out = apply_rope(x, pos)
            np.testing.assert_allclose(
                np.linalg.norm(out.data, axis=1), np.linalg.norm(x.data, axis=1), atol=1e-6)

    def test_relative_shift_invariance(self):
        # <rope(q,p1), rope(k,p2)> depends only on p2 - p1
        rng = derive_rng(2, "ropes")
        for dh in (2, 4, 8, 16):
            for _ in range(100):
                q = ad.Tensor(rng.standard_normal((1, dh)))
                k = ad.Tensor(rng.standard_normal((1, dh)))
                p1, p2, d = rng.uniform(0.0, 200.0, 3)
                lhs = float((apply_rope(q, [p1]).data * apply_rope(k, [p2]).data).sum())
                rhs = float((apply_rope(q, [p1 + d]).data * apply_rope(k, [p2 + d]).data).sum())
                assert abs(lhs - rhs) < 1e-6

    def test_fractional_positions_supported(self):
        rng = derive_rng(3, "ropef")
        x = ad.Tensor(rng.standard_normal((3, 4)))
        out_frac = apply_rope(x, [0.5, 1.25, 2.75])
        out_int = apply_rope(x, [0.0, 1.0, 3.0])
        assert not np.array_equal(out_frac.data, out_int.data)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigurationError):
            rope_tables([0.0], 5, np.float64)

    def test_bad_base_rejected(self):
        with pytest.raises(ConfigurationError):
            rope_tables([0.0], 4, np.float64, base=1.0)

    def test_rope_gradient(self):
        rng = derive_rng(4, "ropeg")
        x = ad.Parameter("x", rng.standard_normal((3, 8)))

        def f():
            return ad.mean(ad.square(apply_rope(x, [0.3, 1.7, 4.2])))

        assert ad.finite_diff_check(f, [x]) < 1e-6


class TestAttention:
    def test_single_key_returns_value(self):
        rng = derive_rng(5, "att1")
        q = ad.Tensor(rng.standard_normal((4, 6)))
        k = ad.Tensor(rng.standard_normal((1, 6)))
        v = ad.Tensor(rng.standard_normal((1, 6)))
        out = attention(q, k, v, np.arange(4.0), [0.0], n_heads=3)
        np.testing.assert_allclose(out.data, np.repeat(v.data, 4, axis=0), atol=1e-7)

    def test_identical_keys_average_values(self):
        rng = derive_rng(6, "att2")
        k_row = rng.standard_normal(4)
        v = rng.standard_normal((5, 4))
        q = ad.Tensor(rng.standard_normal((2, 4)))
        out = attention(q, ad.Tensor(np.tile(k_row, (5, 1))), ad.Tensor(v),
                        [0.0, 1.0], np.zeros(5), n_heads=2)
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-6)

    def test_joint_permutation_invariance(self):
        rng = derive_rng(7, "att3")
        q = ad.Tensor(rng.standard_normal((3, 8)))
        k = rng.standard_normal((6, 8))
        v = rng.standard_normal((6, 8))
        kpos = rng.uniform(0, 10, 6)
        base = attention(q, ad.Tensor(k), ad.Tensor(v), np.arange(3.0), kpos, 2)
        perm = rng.permutation(6)
        shuffled = attention(q, ad.Tensor(k[perm]), ad.Tensor(v[perm]),
                             np.arange(3.0), kpos[perm], 2)
        np.testing.assert_allclose(base.data, shuffled.data, atol=1e-6)

    def test_output_is_convex_combination(self):
        # single head: every output coordinate within the value column range
        rng = derive_rng(8, "att4")
        for _ in range(10):
            q = ad.Tensor(rng.standard_normal((4, 4)))
            k = ad.Tensor(rng.standard_normal((7, 4)))
            v = rng.standard_normal((7, 4))
            out = attention(q, k, ad.Tensor(v), np.arange(4.0), np.arange(7.0), 1).data
            assert np.all(out <= v.max(axis=0) + 1e-9)
            assert np.all(out >= v.min(axis=0) - 1e-9)

    def test_empty_keys_rejected(self):
        q = ad.Tensor(np.zeros((2, 4)))
        empty = ad.Tensor(np.zeros((0, 4)))
        with pytest.raises(ValueError):
            attention(q, empty, empty, [0.0, 1.0], [], 2)

    def test_mismatched_kv_rejected(self):
        q = ad.Tensor(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            attention(q, ad.Tensor(np.zeros((3, 4))), ad.Tensor(np.zeros((2, 4))),
                      [0.0, 1.0], [0.0, 1.0, 2.0], 2)

    def test_indivisible_heads_rejected(self):
        q = ad.Tensor(np.zeros((2, 6)))
        with pytest.raises(ConfigurationError):
            attention(q, q, q, [0.0, 1.0], [0.0, 1.0], 4)


class _AdaWrap(ad.Module):
    def __init__(self, rng, dtype=np.float64):
        super().__init__()
        self.embed = self.add_child("embed", TimeEmbedder("embed", 8, rng, dtype))
        self.block = self.add_child("block", AdaLNBlock("block", 6, 8, rng, dtype))
        self.ffn = self.add_child("ffn", FeedForward("ffn", 6, 12, rng, dtype))


class TestAdaLN:
    def test_zero_init_is_identity(self):
        rng = derive_rng(9, "ada1")
        wrap = _AdaWrap(rng)
        x = ad.Tensor(rng.standard_normal((5, 6)))
        out = wrap.block(x, wrap.embed(0.3), lambda h: wrap.ffn(h))
        np.testing.assert_array_equal(out.data, x.data)

    def test_normalized_sublayer_input(self):
        rng = derive_rng(10, "ada2")
        wrap = _AdaWrap(rng)
        seen = {}

        def probe(h):
            seen["sub_input"] = h.data
            return wrap.ffn(h)

        x = ad.Tensor(rng.standard_normal((4, 6)))
        # modulation is zero-initialized, so the sublayer sees LN(x) exactly
        wrap.block(x, wrap.embed(0.5), probe)
        np.testing.assert_allclose(seen["sub_input"].mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(seen["sub_input"].var(axis=-1), 1.0, atol=1e-4)

    def test_gradient_through_block(self):
        rng = derive_rng(11, "ada3")
        wrap = _AdaWrap(rng)
        x = ad.Tensor(rng.standard_normal((4, 6)))

        def f():
            return ad.mean(ad.square(wrap.block(x, wrap.embed(0.37), lambda h: wrap.ffn(h))))

        err = ad.finite_diff_check(f, list(wrap.parameters().values()))
        assert err < 1e-4


class TestTimeEmbedder:
    def test_deterministic_in_t_and_params(self):
        rng = derive_rng(12, "te")
        embed = TimeEmbedder("te", 16, rng, np.float64)
        a = embed(0.25).embedding.data
        b = embed(0.25).embedding.data
        assert np.array_equal(a, b)
        c = embed(0.26).embedding.data
        assert not np.array_equal(a, c)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigurationError):
            TimeEmbedder("te", 7, derive_rng(0, "x"), np.float64)


def test_linear_zero_init():
    layer = Linear("z", 4, 3, derive_rng(13, "lin"), np.float64, zero_init=True)
    out = layer(ad.Tensor(np.ones((2, 4))))
    assert np.all(out.data == 0.0)
