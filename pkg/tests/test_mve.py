import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emlrseg.mve import (
    DEFAULT_WINDOW_COUNTS,
    WindowPlan,
    WindowSpec,
    assemble_full_grid,
    attention_pair_count,
    extract,
    extract_grouped,
    sample_window_plan,
    scatter_back,
)
from emlrseg.tensor import Tensor
from emlrseg.vit import sample_mask, sincos_pos_table

GRID14 = (14, 14)


class TestWindowSpec:
    def test_indices_row_major(self):
        spec = WindowSpec(2, (1, 2), (4, 5))
        np.testing.assert_array_equal(spec.token_indices, [7, 8, 12, 13])
        assert spec.coords == [(1, 2), (1, 3), (2, 2), (2, 3)]

    def test_does_not_fit(self):
        with pytest.raises(ValueError):
            WindowSpec(3, (2, 0), (4, 4))

    @given(st.integers(1, 9), st.integers(1, 9), st.data())
    def test_indices_are_exactly_the_cells(self, gh, gw, data):
        size = data.draw(st.integers(1, min(gh, gw)))
        r = data.draw(st.integers(0, gh - size))
        c = data.draw(st.integers(0, gw - size))
        spec = WindowSpec(size, (r, c), (gh, gw))
        brute = [i * gw + j for i in range(gh) for j in range(gw) if r <= i < r + size and c <= j < c + size]
        assert list(spec.token_indices) == brute


class TestSampling:
    def test_default_plan_counts(self):
        assert dict(DEFAULT_WINDOW_COUNTS) == {5: 4, 7: 2, 9: 1}
        plan = sample_window_plan(GRID14, seed=0)
        assert len(plan) == 7
        assert sum(s.size ** 2 for s in plan.specs) == 279

    def test_full_size_window_unique_position(self):
        for seed in range(10):
            plan = sample_window_plan(GRID14, {14: 1}, seed)
            assert plan.specs[0].top_left == (0, 0)

    def test_deterministic(self):
        assert sample_window_plan(GRID14, seed=3).to_triples() == sample_window_plan(GRID14, seed=3).to_triples()

    def test_too_big(self):
        with pytest.raises(ValueError):
            sample_window_plan((8, 8), DEFAULT_WINDOW_COUNTS, 0)

    @given(st.integers(0, 2**31), st.integers(5, 20), st.integers(9, 20))
    def test_all_windows_fit(self, seed, gh, gw):
        gh = max(gh, 9)
        plan = sample_window_plan((gh, gw), seed=seed)
        for s in plan.specs:
            assert s.top_left[0] + s.size <= gh and s.top_left[1] + s.size <= gw

    def test_triples_round_trip(self):
        plan = sample_window_plan(GRID14, seed=1)
        again = WindowPlan.from_triples(plan.to_triples(), GRID14)
        assert again.to_triples() == plan.to_triples()


def _encoded(rng, plan, d=8):
    return Tensor(rng.standard_normal((len(plan.visible_indices), d)))


class TestAssemble:
    def test_ratio_zero_is_identity_order(self, rng):
        plan = sample_mask(16, 0.0, 0)
        enc = _encoded(rng, plan)
        out = assemble_full_grid(enc, plan, Tensor(np.zeros(8)), sincos_pos_table(4, 4, 8, np.float64))
        np.testing.assert_array_equal(out.data, enc.data)

    def test_visible_slots_and_mask_slots(self, rng):
        plan = sample_mask(16, 0.5, 2)
        enc = _encoded(rng, plan)
        tok = rng.standard_normal(8)
        pos = sincos_pos_table(4, 4, 8, np.float64)
        out = assemble_full_grid(enc, plan, Tensor(tok), pos).data
        np.testing.assert_array_equal(out[plan.visible_indices], enc.data)
        np.testing.assert_allclose(out[plan.masked_indices], tok + pos[plan.masked_indices], rtol=0, atol=0)

    def test_all_but_one_masked_differ_only_by_position(self, rng):
        plan = sample_mask(16, 15 / 16, 0)
        assert len(plan.visible_indices) == 1
        pos = sincos_pos_table(4, 4, 8, np.float64)
        out = assemble_full_grid(_encoded(rng, plan), plan, Tensor(rng.standard_normal(8)), pos).data
        m = plan.masked_indices
        np.testing.assert_allclose(out[m] - pos[m], np.broadcast_to(out[m[0]] - pos[m[0]], (15, 8)), atol=1e-15)

    @given(st.integers(1, 64), st.floats(0, 0.95), st.integers(0, 1000))
    def test_scatter_indices_permutation(self, t, ratio, seed):
        plan = sample_mask(t, ratio, seed)
        order = np.sort(np.concatenate([plan.visible_indices, plan.masked_indices]))
        np.testing.assert_array_equal(order, np.arange(t))

    def test_batched_matches_single(self, rng):
        plans = [sample_mask(16, 0.5, s) for s in range(3)]
        enc = rng.standard_normal((3, 8, 8))
        tok = Tensor(rng.standard_normal(8))
        pos = sincos_pos_table(4, 4, 8, np.float64)
        batched = assemble_full_grid(Tensor(enc), plans, tok, pos).data
        for i, p in enumerate(plans):
            np.testing.assert_array_equal(batched[i], assemble_full_grid(Tensor(enc[i]), p, tok, pos).data)

    def test_count_mismatch(self, rng):
        plan = sample_mask(16, 0.5, 0)
        with pytest.raises(ValueError):
            assemble_full_grid(Tensor(np.zeros((7, 8))), plan, Tensor(np.zeros(8)), np.zeros((16, 8)))


class TestExtract:
    def test_one_by_one_window(self, rng):
        full = Tensor(rng.standard_normal((16, 4)))
        plan = WindowPlan.from_triples([(1, 2, 3)], (4, 4))
        np.testing.assert_array_equal(extract(full, plan).tokens[0].data, full.data[[11]])

    def test_locality(self, rng):
        x = rng.standard_normal((36, 4))
        plan = WindowPlan.from_triples([(2, 0, 0), (2, 3, 3)], (6, 6))
        a = [t.data for t in extract(Tensor(x), plan).tokens]
        covered = np.concatenate([s.token_indices for s in plan.specs])
        y = x.copy()
        outside = np.setdiff1d(np.arange(36), covered)
        y[outside] = rng.standard_normal((outside.size, 4))
        b = [t.data for t in extract(Tensor(y), plan).tokens]
        for u, v, s in zip(a, b, plan.specs):
            np.testing.assert_array_equal(u, v)
            np.testing.assert_array_equal(u, x[s.token_indices])

    @pytest.mark.parametrize("seed", range(5))
    def test_masked_counts_match_set_intersection(self, seed):
        mask = sample_mask(196, 0.6, seed)
        assert len(mask.masked_indices) == 117
        plan = sample_window_plan(GRID14, seed=seed + 100)
        fields = extract(Tensor(np.zeros((196, 2))), plan, mask)
        mset = set(mask.masked_indices.tolist())
        expected_total = 0
        for spec, flags in zip(plan.specs, fields.masked):
            cells = {(r * 14 + c) for r in range(spec.top_left[0], spec.top_left[0] + spec.size)
                     for c in range(spec.top_left[1], spec.top_left[1] + spec.size)}
            assert int(flags.sum()) == len(cells & mset)
            expected_total += len(cells & mset)
        assert sum(int(f.sum()) for f in fields.masked) == expected_total

    @given(st.integers(0, 10_000))
    def test_scatter_back_reproduces_gathered(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((196, 3))
        plan = sample_window_plan(GRID14, seed=seed)
        back = scatter_back(extract(Tensor(x), plan), 196)
        covered = np.unique(np.concatenate([s.token_indices for s in plan.specs]))
        np.testing.assert_array_equal(back[covered], x[covered])
        assert np.isnan(np.delete(back, covered, axis=0)).all()

    def test_grouped_matches_per_window(self, rng):
        plans = [sample_window_plan(GRID14, seed=s) for s in range(2)]
        masks = [sample_mask(196, 0.6, s) for s in range(2)]
        x = rng.standard_normal((2, 196, 4))
        groups = extract_grouped(Tensor(x), plans, masks)
        assert [g.size for g in groups] == [5, 7, 9]
        for g in groups:
            count = plans[0].counts_by_size[g.size]
            for b in range(2):
                singles = [f for f, s in zip(extract(Tensor(x[b]), plans[b], masks[b]).tokens, plans[b].specs)
                           if s.size == g.size]
                flags = [f for f, s in zip(extract(Tensor(x[b]), plans[b], masks[b]).masked, plans[b].specs)
                         if s.size == g.size]
                for k in range(count):
                    np.testing.assert_array_equal(g.tokens.data[b * count + k], singles[k].data)
                    np.testing.assert_array_equal(g.masked[b * count + k], flags[k])

    def test_positions_match_full_grid(self):
        pos = sincos_pos_table(14, 14, 64, np.float64)
        plan = sample_window_plan(GRID14, seed=7)
        fields = extract(Tensor(pos), plan)
        for spec, tok in zip(plan.specs, fields.tokens):
            for k, (r, c) in enumerate(spec.coords):
                np.testing.assert_array_equal(tok.data[k], pos[r * 14 + c])


class TestPairCount:
    def test_global(self):
        assert attention_pair_count(grid=GRID14) == 38_416 == 196 ** 2

    def test_default_plan(self):
        plan = sample_window_plan(GRID14, seed=0)
        assert attention_pair_count(plan) == 4 * 625 + 2 * 2401 + 6561 == 13_863
        assert 38_416 / 13_863 == pytest.approx(2.77, abs=0.005)

    def test_single_unit_window(self):
        assert attention_pair_count(WindowPlan.from_triples([(1, 0, 0)], (3, 3))) == 1
