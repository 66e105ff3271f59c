"""Overlap metrics and the linear-probe domain-discrepancy proxy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segadapt.errors import ContractError, ShapeError
from segadapt.metrics import dice, hausdorff, proxy_a_distance

from conftest import rng


def brute_hausdorff(a_pts, b_pts):
    """All-pairs directed-distance oracle."""
    d = np.sqrt(((a_pts[:, None, :] - b_pts[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


class TestDice:
    def test_identical_masks(self):
        m = (rng(0).uniform(size=(16, 16)) > 0.5).astype(np.uint8)
        assert dice(m, m, 1) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice(a, b, 1) == 0.0

    def test_partial_overlap_two_thirds(self):
        # pred marks 4 pixels, truth marks 2 of those -> 2*2/(4+2)
        pred = np.zeros((4, 4), dtype=np.uint8)
        truth = np.zeros((4, 4), dtype=np.uint8)
        pred[0, :4] = 1
        truth[0, :2] = 1
        assert dice(pred, truth, 1) == pytest.approx(2.0 / 3.0)

    def test_both_empty_scores_one(self):
        z = np.zeros((4, 4), dtype=np.uint8)
        assert dice(z, z, 2) == 1.0

    def test_one_empty_scores_zero(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        b[1, 1] = 1
        assert dice(a, b, 1) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((2, 2)), np.zeros((3, 3)), 1)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        r = rng(seed)
        a = r.integers(0, 3, size=(8, 8)).astype(np.uint8)
        b = r.integers(0, 3, size=(8, 8)).astype(np.uint8)
        for label in range(3):
            d_ab = dice(a, b, label)
            assert d_ab == dice(b, a, label)
            assert 0.0 <= d_ab <= 1.0


class TestHausdorff:
    def test_identical_sets(self):
        m = (rng(1).uniform(size=(16, 16)) > 0.7).astype(np.uint8)
        assert hausdorff(m, m, 1) == 0.0

    def test_singletons_three_four_five(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert hausdorff(a, b, 1) == pytest.approx(5.0)

    def test_subset_uses_outer_set_distance(self):
        outer = np.zeros((8, 8), dtype=np.uint8)
        inner = np.zeros((8, 8), dtype=np.uint8)
        outer[0, 0] = outer[0, 4] = 1
        inner[0, 0] = 1
        assert hausdorff(inner, outer, 1) == pytest.approx(4.0)

    def test_both_empty_is_zero(self):
        z = np.zeros((8, 8), dtype=np.uint8)
        assert hausdorff(z, z, 1) == 0.0

    def test_one_empty_is_image_diagonal(self):
        a = np.zeros((3, 4), dtype=np.uint8)
        b = np.zeros((3, 4), dtype=np.uint8)
        b[0, 0] = 1
        assert hausdorff(a, b, 1) == pytest.approx(5.0)

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            hausdorff(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 1)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_all_pairs_oracle_and_is_symmetric(self, seed):
        r = rng(seed)
        a = (r.uniform(size=(10, 10)) > 0.8).astype(np.uint8)
        b = (r.uniform(size=(10, 10)) > 0.8).astype(np.uint8)
        if a.sum() == 0 or b.sum() == 0:
            return
        want = brute_hausdorff(np.argwhere(a == 1).astype(float),
                               np.argwhere(b == 1).astype(float))
        got = hausdorff(a, b, 1)
        assert got == pytest.approx(want)
        assert got == hausdorff(b, a, 1)

    def test_triangle_inequality_spot_check(self):
        r = rng(9)
        maps = [(r.uniform(size=(12, 12)) > 0.8).astype(np.uint8)
                for _ in range(3)]
        for m in maps:
            m[0, 0] = 1  # keep all three non-empty
        ab = hausdorff(maps[0], maps[1], 1)
        bc = hausdorff(maps[1], maps[2], 1)
        ac = hausdorff(maps[0], maps[2], 1)
        assert ac <= ab + bc + 1e-12


class TestProxyADistance:
    def test_same_pool_is_near_chance(self):
        pool = rng(2).normal(size=(80, 16))
        a_hat = proxy_a_distance(pool[:40], pool[40:], seed=3)
        assert a_hat < 0.3

    def test_separable_pools_hit_ceiling(self):
        r = rng(4)
        fa = r.normal(loc=0.0, size=(40, 16))
        fb = r.normal(loc=8.0, size=(40, 16))
        assert proxy_a_distance(fa, fb, seed=5) == pytest.approx(2.0)

    def test_range_and_determinism(self):
        r = rng(6)
        fa = r.normal(loc=0.0, size=(30, 8))
        fb = r.normal(loc=0.5, size=(30, 8))
        a1 = proxy_a_distance(fa, fb, seed=7)
        a2 = proxy_a_distance(fa, fb, seed=7)
        assert a1 == a2
        assert 0.0 <= a1 <= 2.0

    def test_needs_twenty_samples_per_domain(self):
        r = rng(8)
        with pytest.raises(ContractError):
            proxy_a_distance(r.normal(size=(19, 4)), r.normal(size=(25, 4)))

    def test_needs_matching_feature_width(self):
        r = rng(9)
        with pytest.raises(ShapeError):
            proxy_a_distance(r.normal(size=(25, 4)), r.normal(size=(25, 5)))
