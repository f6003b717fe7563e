import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from pointpixel.errors import ConfigError, ContractError, DegeneratePairError
from pointpixel.pairing import (
    HardnessSchedule, SpatialGrid, build_pair_batch, disturbance_candidates, hardness, hardness_bound,
    nearest_neighbor, sample_disturbance,
)
from pointpixel.scene import generate_scene


class TestHardness:
    def test_examples(self):
        assert hardness((0, 0, 0), (0, 0, 2)) == 0.5
        assert hardness((0, 0, 0), (3, 4, 0)) == pytest.approx(0.2, abs=1e-15)

    def test_coincident(self):
        with pytest.raises(DegeneratePairError):
            hardness((1, 2, 3), (1, 2, 3))


class TestSchedule:
    def test_examples(self):
        s = HardnessSchedule(0.5, 0.01, 10.0)
        assert hardness_bound(0, s) == 0.5
        assert hardness_bound(2000, s) == 10.0

    def test_default_reaches_epsilon_at_80_percent(self):
        s = HardnessSchedule.default(1.0, 1000)
        assert s.h0 == 1.0 and s.epsilon == 20.0
        assert s.crossing_iteration() == 800
        assert hardness_bound(799, s) < 20.0 <= hardness_bound(800, s)

    def test_default_is_scale_free(self):
        a, b = HardnessSchedule.default(1.0, 500), HardnessSchedule.default(4.0, 500)
        assert b.h0 * 4.0 == a.h0 and b.epsilon * 4.0 == a.epsilon

    def test_modes(self):
        base = HardnessSchedule.default(1.0, 100)
        easy = HardnessSchedule.for_mode("easy", base)
        hard = HardnessSchedule.for_mode("hard", base)
        assert [hardness_bound(k, easy) for k in (0, 50, 100)] == [1.0] * 3
        assert [hardness_bound(k, hard) for k in (0, 50, 100)] == [20.0] * 3
        assert HardnessSchedule.for_mode("progressive", base) is base
        with pytest.raises(ConfigError):
            HardnessSchedule.for_mode("medium", base)

    @pytest.mark.parametrize("args", [(0.0, 0.1, 1.0), (1.0, -0.1, 2.0), (2.0, 0.1, 1.0), (1.0, math.inf, 2.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            HardnessSchedule(*args)

    def test_negative_iteration(self):
        with pytest.raises(ContractError):
            hardness_bound(-1, HardnessSchedule(1.0, 0.0, 1.0))

    @settings(max_examples=200, deadline=None)
    @given(h0=st.floats(1e-3, 10), slope=st.floats(0, 5), extra=st.floats(0, 50),
           k1=st.integers(0, 10**6), k2=st.integers(0, 10**6))
    def test_monotone_and_capped(self, h0, slope, extra, k1, k2):
        s = HardnessSchedule(h0, slope, h0 + extra)
        lo, hi = sorted((k1, k2))
        assert hardness_bound(lo, s) <= hardness_bound(hi, s) <= s.epsilon

    @settings(max_examples=200, deadline=None)
    @given(h0=st.floats(1e-3, 10), slope=st.floats(1e-6, 5), extra=st.floats(1e-3, 50), k=st.integers(0, 10**6))
    def test_exact_formula(self, h0, slope, extra, k):
        s = HardnessSchedule(h0, slope, h0 + extra)
        exact = min(Fraction(h0) + Fraction(slope) * k, Fraction(s.epsilon))
        assert hardness_bound(k, s) == float(exact)


class TestSpatialGrid:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), radius=st.floats(0.01, 2.0), cell=st.floats(0.02, 0.5))
    def test_query_matches_brute_force(self, seed, radius, cell):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-1, 1, (300, 3))
        grid = SpatialGrid(pts, cell)
        c = pts[rng.integers(300)]
        expected = np.flatnonzero(np.linalg.norm(pts - c, axis=1) < radius)
        np.testing.assert_array_equal(grid.query(c, radius), expected)

    def test_strict_radius(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        assert SpatialGrid(pts, 0.5).query(pts[0], 1.0).tolist() == [0]

    def test_bad_cell(self):
        with pytest.raises(ContractError):
            SpatialGrid(np.zeros((2, 3)), 0.0)


def line_points(distances):
    return np.array([[0.0, 0.0, 0.0]] + [[d, 0.0, 0.0] for d in distances])


class TestSampleDisturbance:
    def test_single_candidate(self):
        pts = line_points([1.0, 3.0, 5.0])
        d = sample_disturbance(0, pts, 0.5, np.random.default_rng(0))
        assert d.j == 1 and not d.fallback

    def test_fallback_to_nearest(self):
        pts = line_points([0.5, 0.7, 2.0])
        d = sample_disturbance(0, pts, 10.0, np.random.default_rng(0))
        assert d.j == 1 and d.fallback

    def test_nearest_tie_goes_to_lowest_index(self):
        pts = np.array([[0.0, 0, 0], [0.0, 1, 0], [1.0, 0, 0]])
        assert nearest_neighbor(0, pts) == 1

    def test_coincident_points_never_chosen(self):
        pts = np.array([[0.0, 0, 0], [0.0, 0, 0], [0.3, 0, 0]])
        assert disturbance_candidates(0, pts, 1.0).tolist() == [2]
        assert nearest_neighbor(0, pts) == 2
        with pytest.raises(DegeneratePairError):
            nearest_neighbor(0, pts[:2])

    def test_preconditions(self):
        with pytest.raises(ContractError):
            sample_disturbance(0, np.zeros((1, 3)), 1.0, np.random.default_rng(0))
        with pytest.raises(ContractError):
            sample_disturbance(0, line_points([1.0]), 0.0, np.random.default_rng(0))

    def test_grid_and_scan_agree(self):
        pts = generate_scene(2).points
        grid = SpatialGrid(pts, 1 / 20)
        for i in (0, 100, 700):
            for bound in (1.0, 5.0, 20.0):
                np.testing.assert_array_equal(disturbance_candidates(i, pts, bound, grid),
                                              disturbance_candidates(i, pts, bound))

    def test_uniform_over_candidates(self):
        pts = generate_scene(3).points
        # bound 0.1 means radius 10: every other point is a candidate
        cand = disturbance_candidates(5, pts, 0.1)
        assert len(cand) == len(pts) - 1
        rng = np.random.default_rng(1)
        draws = [sample_disturbance(5, pts, 0.1, rng).j for _ in range(10_000)]
        counts = np.bincount(draws, minlength=len(pts))[cand]
        assert chisquare(counts).pvalue > 0.01

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**6), bound=st.floats(0.5, 60.0))
    def test_constraint_or_flagged_fallback(self, seed, bound):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-1, 1, (200, 3))
        i = int(rng.integers(200))
        d = sample_disturbance(i, pts, bound, rng)
        dist = np.linalg.norm(pts - pts[i], axis=1)
        dist[i] = np.inf
        assert d.j != i
        if d.fallback:
            assert not np.any(dist < 1.0 / bound)
            assert d.j == int(np.argmin(dist))
        else:
            assert dist[d.j] < 1.0 / bound


class TestBuildPairBatch:
    def setup_method(self):
        self.pts = generate_scene(4).points
        self.corr = np.column_stack([np.arange(len(self.pts))] * 2)

    def test_shapes_and_constraints(self):
        sched = HardnessSchedule.default(1.0, 100)
        b = build_pair_batch(self.pts, self.corr, 50, 16, sched, np.random.default_rng(0))
        assert b.size == 16 and len(set(b.anchor_idx.tolist())) == 16
        assert np.all(b.disturb_idx != b.positive_idx)
        assert b.bound == hardness_bound(50, sched)
        for a, j, fb in zip(b.anchor_idx, b.disturb_idx, b.fallback):
            dist = np.linalg.norm(self.pts - self.pts[a], axis=1)
            dist[a] = np.inf
            if fb:
                assert j == np.argmin(dist)
            else:
                assert 1.0 / dist[j] > b.bound

    def test_deterministic(self):
        sched = HardnessSchedule.default(1.0, 100)
        a = build_pair_batch(self.pts, self.corr, 10, 8, sched, np.random.default_rng(3))
        b = build_pair_batch(self.pts, self.corr, 10, 8, sched, np.random.default_rng(3))
        assert a.same_as(b)

    def test_subset_correspondences(self):
        corr = self.corr[::7]
        b = build_pair_batch(self.pts, corr, 0, 8, HardnessSchedule(1.0, 0.0, 20.0), np.random.default_rng(0))
        assert set(b.disturb_idx) <= set(corr[:, 1])

    def test_batch_size_errors(self):
        sched = HardnessSchedule(1.0, 0.0, 20.0)
        with pytest.raises(ContractError):
            build_pair_batch(self.pts, self.corr[:4], 0, 8, sched, np.random.default_rng(0))
        with pytest.raises(ContractError):
            build_pair_batch(self.pts, self.corr, 0, 1, sched, np.random.default_rng(0))
