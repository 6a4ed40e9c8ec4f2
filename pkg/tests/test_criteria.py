import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fapm.criteria import (
    ColumnNorms,
    Criterion,
    avg_abs,
    score,
    score_fapm,
    score_magnitude,
    score_random,
    score_relative,
    score_wanda,
)
from fapm.errors import EmptyTensor, InvalidNorms, MissingNorms, NormLengthMismatch, ShapeMismatch

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
shapes = hnp.array_shapes(min_dims=2, max_dims=2, max_side=6)
matrices = hnp.arrays(np.float64, shapes, elements=finite)
# keeps products clear of the subnormal range
normal = st.one_of(st.just(0.0), st.floats(1e-100, 1e6), st.floats(-1e6, -1e-100))


@st.composite
def matrix_pairs(draw):
    shape = draw(shapes)
    return draw(hnp.arrays(np.float64, shape, elements=finite)), draw(hnp.arrays(np.float64, shape, elements=finite))


def mean_oracle(w) -> float:
    total = sum((Fraction(abs(float(x))) for x in np.ravel(w)), Fraction(0))
    return float(total / np.size(w))


def fapm_oracle(delta, w):
    """The score evaluated exactly from the binary64 mean, then rounded."""
    avg = Fraction(mean_oracle(w))
    out = np.empty(delta.shape)
    for idx in np.ndindex(delta.shape):
        d, x = Fraction(abs(float(delta[idx]))), Fraction(abs(float(w[idx])))
        if d == 0:
            out[idx] = 0.0
        elif x == 0:
            out[idx] = -math.inf
        else:
            out[idx] = float(d - avg * d / x)
    return out


class TestAvgAbs:
    def test_simple(self):
        assert avg_abs(np.array([[1.0, -3.0]])) == 2.0

    def test_correct_rounding_beats_naive(self):
        w = np.array([1e16, 1.0, -1e16, 1.0])
        assert avg_abs(w) == mean_oracle(w)

    def test_empty(self):
        with pytest.raises(EmptyTensor):
            avg_abs(np.zeros((0, 3)))

    def test_subnormals_and_zeros(self):
        w = np.array([5e-324, 0.0, 1e-310, -2.5e-320])
        assert avg_abs(w) == mean_oracle(w)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 40),
                      elements=st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)))
    def test_matches_exact_rational_mean(self, w):
        assert avg_abs(w) == mean_oracle(w)


class TestFapm:
    def test_worked_example(self, worked_example):
        delta, w = worked_example
        got = score_fapm(delta, w)
        assert np.allclose(got, [[0.02, -2.4], [0.055, -0.32]], rtol=1e-12, atol=0)

    def test_sentinels(self):
        delta = np.array([[0.0, 0.5, 0.0, 0.3]])
        w = np.array([[0.0, 0.0, 1.0, 2.0]])
        s = score_fapm(delta, w)
        assert s[0, 0] == 0.0 and s[0, 1] == -math.inf and s[0, 2] == 0.0
        assert s[0, 3] == pytest.approx(0.3 - 0.75 * 0.3 / 2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            score_fapm(np.ones((2, 2)), np.ones((2, 3)))

    def test_empty_tensor_scores_empty(self):
        assert score_fapm(np.ones((0, 2)), np.ones((0, 2))).shape == (0, 2)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, shapes, elements=normal), st.integers(0, 2**32))
    def test_matches_exact_oracle(self, delta, seed):
        w = np.random.default_rng(seed).standard_normal(delta.shape)
        w[0, 0] = 0.0
        got, want = score_fapm(delta, w), fapm_oracle(delta, w)
        assert np.array_equal(np.isinf(got), np.isinf(want))
        assert np.allclose(got, want, rtol=1e-15, atol=0)

    def test_near_cancellation_stays_accurate(self):
        w = np.array([[1.0, 1.0 + 2**-40, 1.0 - 2**-40, 3.0]])
        delta = np.full_like(w, 0.7)
        got, want = score_fapm(delta, w), fapm_oracle(delta, w)
        assert np.allclose(got, want, rtol=1e-15, atol=0)

    @settings(max_examples=200, deadline=None)
    @given(matrix_pairs())
    def test_never_nan(self, pair):
        delta, w = pair
        assert not np.isnan(score_fapm(delta, w)).any()
        assert not np.isnan(score_relative(delta, w)).any()

    @settings(max_examples=200, deadline=None)
    @given(matrices, st.integers(0, 2**32))
    def test_sign_tracks_weight_vs_average(self, delta, seed):
        w = np.random.default_rng(seed).uniform(0.1, 3.0, delta.shape)
        s = score_fapm(delta, w)
        nz = delta != 0
        big = np.abs(w) > avg_abs(w)
        small = np.abs(w) < avg_abs(w)
        assert (s[nz & big] >= 0).all()
        assert (s[nz & small] <= 0).all()

    @settings(max_examples=100, deadline=None)
    @given(matrices, st.floats(1e-3, 1e3), st.integers(0, 2**32))
    def test_constant_weights_score_zero(self, delta, c, seed):
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], delta.shape)
        assert not score_fapm(delta, c * signs).any()

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, shapes, elements=normal), st.integers(-20, 20))
    def test_power_of_two_scaling_is_exact(self, delta, e):
        w = np.linspace(0.5, 2.0, delta.size).reshape(delta.shape)
        c = 2.0 ** e
        assert np.array_equal(score_fapm(c * delta, w), c * score_fapm(delta, w))


class TestOthers:
    def test_magnitude(self):
        assert score_magnitude(np.array([-2.0, 0.5])).tolist() == [2.0, 0.5]

    def test_relative_sentinel(self):
        s = score_relative(np.array([1.0, 0.0, 0.5]), np.array([0.0, 0.0, 0.25]))
        assert s.tolist() == [math.inf, 0.0, 2.0]

    def test_wanda_broadcast(self):
        delta = np.array([[1.0, -2.0, 3.0], [4.0, 5.0, -6.0]])
        s = score_wanda(delta, np.array([1.0, 0.5, 2.0]))
        assert s.tolist() == [[1.0, 1.0, 6.0], [4.0, 2.5, 12.0]]

    def test_wanda_length_mismatch(self):
        with pytest.raises(NormLengthMismatch):
            score_wanda(np.ones((2, 3)), np.ones(2))

    def test_random_is_deterministic_per_name(self):
        a = score_random((3, 4), 7, "w")
        assert np.array_equal(a, score_random((3, 4), 7, "w"))
        assert not np.array_equal(a, score_random((3, 4), 7, "v"))
        assert ((a >= 0) & (a < 1)).all()

    def test_dispatch(self, worked_example):
        delta, w = worked_example
        assert np.array_equal(score("fapm", "x", delta, w), score_fapm(delta, w))
        assert np.array_equal(score(Criterion.RELATIVE, "x", delta, w), score_relative(delta, w))
        assert np.array_equal(score("wanda", "x", delta, norms={"x": np.ones(2)}), np.abs(delta))
        with pytest.raises(MissingNorms):
            score("wanda", "x", delta)
        with pytest.raises(MissingNorms):
            score("wanda", "y", delta, norms=ColumnNorms({"x": np.ones(2)}))


class TestColumnNorms:
    def test_validation(self):
        with pytest.raises(InvalidNorms):
            ColumnNorms({"w": np.array([1.0, -1.0])})
        with pytest.raises(InvalidNorms):
            ColumnNorms({"w": np.array([1.0, math.nan])})
        with pytest.raises(InvalidNorms):
            ColumnNorms({"w": np.ones((2, 2))})

    def test_checkpoint_roundtrip(self):
        norms = ColumnNorms({"w": np.array([0.5, 2.0])})
        back = ColumnNorms.from_checkpoint(norms.to_checkpoint())
        assert back.get("w").tolist() == [0.5, 2.0]
