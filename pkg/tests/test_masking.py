import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fapm.errors import KOutOfRange, ShapeMismatch, SparsityOutOfRange
from fapm.masking import Scope, apply_mask, keep_count, select_global, select_local, select_topk


def exact_total(values):
    """Sum as a sortable key: (+inf count, -(-inf count), exact finite sum)."""
    pos = sum(1 for v in values if v == math.inf)
    neg = sum(1 for v in values if v == -math.inf)
    return pos, -neg, sum((Fraction(v) for v in values if math.isfinite(v)), Fraction(0))


def brute_force_keep(flat, k):
    """Lexicographically smallest index set among those with maximum sum."""
    best, best_key = (), None
    for combo in itertools.combinations(range(len(flat)), k):
        key = exact_total([flat[i] for i in combo])
        if best_key is None or key > best_key:
            best, best_key = combo, key
    return set(best)


class TestKeepCount:
    @pytest.mark.parametrize("n, s, k", [
        (10, 0.55, 5), (10, 0.5, 5), (10, 0.0, 10), (10, 1.0, 0), (3, 0.5, 2),
        (1, 0.5, 1), (0, 0.3, 0), (1000, 0.9, 100), (7, 0.95, 0),
    ])
    def test_values(self, n, s, k):
        assert keep_count(n, s) == k

    def test_out_of_range(self):
        with pytest.raises(SparsityOutOfRange):
            keep_count(10, 1.5)
        with pytest.raises(SparsityOutOfRange):
            keep_count(10, -0.1)

    @given(st.integers(0, 10**6), st.floats(0, 1))
    def test_bounds_and_monotone(self, n, s):
        k = keep_count(n, s)
        assert 0 <= k <= n
        assert keep_count(n, min(1.0, s + 0.01)) <= k


class TestTopK:
    def test_ties_go_to_lower_index(self):
        keep = select_topk(np.array([1.0, 2.0, 2.0, 2.0, 0.0]), 2)
        assert keep.tolist() == [False, True, True, False, False]

    def test_partition_path_tie_rule(self):
        scores = np.zeros(10_000)
        scores[::7] = 1.0
        keep = select_topk(scores, 2000)
        expected = np.zeros(10_000, dtype=bool)
        expected[::7] = True
        expected[np.flatnonzero(scores == 0)[: 2000 - expected.sum()]] = True
        assert np.array_equal(keep, expected)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 300),
                      elements=st.sampled_from([-np.inf, -1.0, 0.0, 0.5, 1.0, np.inf])), st.data())
    def test_sort_and_partition_paths_agree(self, scores, data):
        k = data.draw(st.integers(0, scores.size))
        a = select_topk(scores, k, sort_cutoff=10**9)
        b = select_topk(scores, k, sort_cutoff=0)
        assert np.array_equal(a, b)
        assert a.sum() == k

    def test_k_out_of_range(self):
        with pytest.raises(KOutOfRange):
            select_topk(np.ones(3), 4)

    def test_shape_preserved(self):
        assert select_topk(np.ones((2, 3)), 4).shape == (2, 3)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 8),
                      elements=st.one_of(st.floats(-10, 10), st.sampled_from([0.0, 1.0, -np.inf, np.inf]))),
           st.data())
    def test_matches_exhaustive_search(self, scores, data):
        k = data.draw(st.integers(0, scores.size))
        keep = select_topk(scores, k)
        assert set(np.flatnonzero(keep).tolist()) == brute_force_keep(scores.tolist(), k)


class TestScopes:
    def test_local(self, rng):
        s = rng.standard_normal((5, 5))
        keep = select_local(s, 0.6)
        assert keep.sum() == 10
        assert s[keep].min() >= s[~keep].max()

    def test_global_pools_in_name_order(self):
        maps = {"b": np.array([3.0, 1.0]), "a": np.array([1.0, 2.0])}
        mask = select_global(maps, 0.5)
        assert mask.scope is Scope.GLOBAL
        assert mask.bits["a"].tolist() == [False, True]
        assert mask.bits["b"].tolist() == [True, False]
        assert mask.keep_counts == {"a": 1, "b": 1}

    def test_global_tie_prefers_earlier_name(self):
        mask = select_global({"z": np.ones(2), "a": np.ones(2)}, 0.5)
        assert mask.bits["a"].tolist() == [True, True]
        assert mask.bits["z"].tolist() == [False, False]

    def test_global_empty(self):
        assert select_global({}, 0.5).bits == {}


class TestApplyMask:
    def test_dropped_are_positive_zero(self):
        out = apply_mask(np.array([-1.0, -2.0]), np.array([True, False]))
        assert out[0] == -1.0 and out[1] == 0.0 and not np.signbit(out[1])

    def test_shape_check(self):
        with pytest.raises(ShapeMismatch):
            apply_mask(np.ones(3), np.ones(2, dtype=bool))

    def test_mask_checkpoint(self):
        mask = select_global({"w": np.array([[1.0, 0.0]])}, 0.5)
        ckpt = mask.to_checkpoint()
        assert ckpt["w"].to_f64().tolist() == [[1.0, 0.0]]
