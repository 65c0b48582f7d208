import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emlrseg import tensor as T
from emlrseg.gradcheck import check_grads
from emlrseg.tensor import Tensor
from emlrseg.vit import (
    Attention,
    PatchEmbed,
    Stack,
    StackConfig,
    TransformerBlock,
    embed,
    encode_visible,
    grid_coords,
    image_to_grid,
    patchify,
    sample_mask,
    sincos_pos_table,
    unpatchify,
)


class TestPatchify:
    def test_full_geometry_token_count(self):
        assert patchify(np.zeros((3, 224, 224)), 16).shape == (196, 3 * 16 * 16)

    def test_small_image(self):
        assert patchify(np.zeros((1, 16, 16)), 8).shape == (4, 64)

    def test_token_order_is_row_major(self):
        img = np.zeros((1, 16, 16))
        img[0, 0:8, 8:16] = 1.0  # top-right patch
        tok = patchify(img, 8)
        np.testing.assert_array_equal(tok.sum(axis=1), [0, 64, 0, 0])

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2))
    def test_round_trip(self, c, gh, gw, p, lead):
        rng = np.random.default_rng(gh * 31 + gw)
        x = rng.standard_normal((2,) * lead + (c, gh * p, gw * p))
        np.testing.assert_array_equal(unpatchify(patchify(x, p), (gh, gw), c, p), x)

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((1, 10, 16)), 8)

    def test_coords_bijection(self):
        c = grid_coords(5, 7)
        assert len({tuple(r) for r in c}) == 35
        assert c[:, 0].max() == 4 and c[:, 1].max() == 6


class TestPositionalTable:
    def test_zero_input_gives_pure_table(self, rng):
        pe = PatchEmbed(4, 8, (2, 2), rng, np.float64)
        pe.proj.weight.data[:] = rng.standard_normal(pe.proj.weight.shape)
        out = pe(Tensor(np.zeros((4, 4))))
        np.testing.assert_array_equal(out.data, pe.pos_table)

    def test_equal_pixels_different_coords_differ(self, rng):
        pe = PatchEmbed(4, 8, (2, 2), rng, np.float64)
        out = pe(Tensor(np.ones((4, 4)))).data
        assert not np.allclose(out[0], out[3])

    def test_rows_pairwise_distinct_up_to_32(self):
        table = sincos_pos_table(32, 32, 64, np.float64)
        d2 = (table ** 2).sum(1)[:, None] + (table ** 2).sum(1)[None] - 2 * table @ table.T
        np.fill_diagonal(d2, np.inf)
        assert d2.min() > 1e-8
        for g in range(1, 32):
            sub = sincos_pos_table(g, g, 64, np.float64)
            assert len(np.unique(sub.round(12), axis=0)) == g * g

    def test_dim_must_divide_by_four(self):
        with pytest.raises(ValueError):
            sincos_pos_table(2, 2, 6)


class TestMasking:
    def test_reference_mask_ratio(self):
        plan = sample_mask(196, 0.6, seed=0)
        assert len(plan.masked_indices) == 117
        assert len(plan.visible_indices) == 79

    def test_ratio_zero(self):
        assert len(sample_mask(64, 0.0, seed=0).masked_indices) == 0

    def test_deterministic(self):
        a, b = sample_mask(64, 0.6, seed=5), sample_mask(64, 0.6, seed=5)
        np.testing.assert_array_equal(a.masked_indices, b.masked_indices)

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            sample_mask(10, 1.0)

    @given(st.integers(1, 400), st.floats(0.0, 0.99), st.integers(0, 2**31))
    def test_count_and_bookkeeping(self, t, ratio, seed):
        plan = sample_mask(t, ratio, seed)
        m = plan.masked_indices
        assert len(m) == math.floor(ratio * t + 1e-9)
        assert len(np.unique(m)) == len(m)
        assert m.size == 0 or (m.min() >= 0 and m.max() < t)
        assert len(plan.visible_indices) + len(m) == t
        assert plan.masked_flags.sum() == len(m)


def _stack(depth=2, dim=16, heads=4, seed=0):
    return Stack(StackConfig(depth=depth, dim=dim, heads=heads), np.random.default_rng(seed), np.float64)


class TestEncoder:
    def _grid(self, rng, gh=4, gw=4, dim=16):
        pe = PatchEmbed(12, dim, (gh, gw), rng, np.float64)
        img = rng.standard_normal((3, gh * 2, gw * 2))
        return pe, img

    def test_ratio_zero_encodes_all_tokens(self, rng):
        pe, img = self._grid(rng)
        g = embed(image_to_grid(img, 2), pe)
        out = encode_visible(g, sample_mask(16, 0.0, 0), _stack())
        assert out.shape == (16, 16)

    def test_depth_zero_is_identity(self, rng):
        pe, img = self._grid(rng)
        g = embed(image_to_grid(img, 2), pe)
        plan = sample_mask(16, 0.5, 1)
        out = encode_visible(g, plan, _stack(depth=0))
        np.testing.assert_array_equal(out.data, g.tokens.data[plan.visible_indices])

    def test_permutation_equivariance(self, rng):
        stack = _stack()
        x = rng.standard_normal((6, 16)) + sincos_pos_table(2, 3, 16, np.float64)
        perm = np.array([3, 1, 2, 0, 5, 4])
        a = stack(Tensor(x)).data
        b = stack(Tensor(x[perm])).data
        np.testing.assert_allclose(b[np.argsort(perm)], a, atol=1e-5)

    def test_masked_pixels_do_not_affect_output(self, rng):
        pe, img = self._grid(rng)
        stack = _stack()
        plan = sample_mask(16, 0.6, 2)
        base = encode_visible(embed(image_to_grid(img, 2), pe), plan, stack).data
        tok = patchify(img, 2)
        tok[plan.masked_indices] = rng.standard_normal(tok[plan.masked_indices].shape) * 100
        img2 = unpatchify(tok, (4, 4), 3, 2)
        again = encode_visible(embed(image_to_grid(img2, 2), pe), plan, stack).data
        np.testing.assert_array_equal(base, again)

    def test_taps(self, rng):
        stack = _stack(depth=3)
        x = Tensor(rng.standard_normal((5, 16)))
        out, taps = stack(x, taps=(1, 3))
        assert len(taps) == 2
        np.testing.assert_array_equal(taps[1].data, out.data)


class TestBlock:
    def test_zero_output_projections_make_identity(self, rng):
        blk = TransformerBlock(16, 4, 4.0, rng, np.float64)
        blk.attn.proj.weight.data[:] = 0.0
        blk.mlp.fc2.weight.data[:] = 0.0
        x = rng.standard_normal((2, 5, 16))
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)

    def test_single_token_attention_weight_is_one(self, rng):
        att = Attention(8, 2, rng, np.float64)
        x = rng.standard_normal((1, 8))
        # with N=1 the softmax is over a singleton, so the output is proj(wv(x))
        expected = att.proj(att.wv(Tensor(x))).data
        np.testing.assert_array_equal(T.softmax(Tensor(np.array([[3.7]]))).data, [[1.0]])
        np.testing.assert_allclose(att(Tensor(x)).data, expected, rtol=1e-14, atol=1e-15)

    def test_attention_rows_sum_to_one(self, rng):
        att = Attention(16, 4, rng, np.float32)
        x = Tensor(rng.standard_normal((7, 16)).astype(np.float32))
        q = att.wq(x).data.reshape(7, 4, 4).transpose(1, 0, 2)
        k = att.wk(x).data.reshape(7, 4, 4).transpose(1, 0, 2)
        w = T.softmax(Tensor(q @ k.transpose(0, 2, 1) / 2.0), axis=-1).data
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)

    def test_gradcheck_one_block(self, rng):
        blk = TransformerBlock(8, 2, 4.0, rng, np.float64)
        for _, p in blk.named_parameters():
            p.data[:] = rng.standard_normal(p.shape) * 0.3
        x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        w = rng.standard_normal((4, 8))
        params = [x] + [p for _, p in blk.named_parameters()]
        errs = check_grads(lambda: (blk(x) * Tensor(w)).sum(), params)
        assert max(errs) <= 1e-4

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            StackConfig(dim=10, heads=4)
