import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import CASES
from sakt.numerics import (
    LN_EPS,
    AdamState,
    DimensionError,
    EmptyRowError,
    NonFiniteGradientError,
    adam_step,
    finite_diff_gradient,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    masked_softmax_rows,
    matmul,
    max_relative_error,
    softmax_backward,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- matmul -----------------------------------------------------------------


def test_matmul_identity_and_zero():
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), x), x)
    np.testing.assert_array_equal(matmul(np.zeros((2, 3)), x), np.zeros((2, 4)))


def test_matmul_hand_computed():
    # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_associative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b, c = rng.standard_normal((3, 4, 4))
        np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-9)


# --- softmax ----------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(masked_softmax_rows([[0.0, 0, 0]], [[True] * 3]), [[1 / 3] * 3])
    np.testing.assert_array_equal(masked_softmax_rows([[5.0, 5.0]], [[True, False]]), [[1.0, 0.0]])
    # exp(1)/(exp(1)+exp(2)) = 1/(1+e)
    e = math.e
    np.testing.assert_allclose(
        masked_softmax_rows([[1.0, 2.0]], [[True, True]]), [[1 / (1 + e), e / (1 + e)]], atol=1e-12
    )
    np.testing.assert_allclose(
        masked_softmax_rows([[1.0, 2.0]], [[True, True]]), [[0.26894, 0.73106]], atol=1e-5
    )


def test_softmax_fully_masked_row():
    with pytest.raises(EmptyRowError):
        masked_softmax_rows([[1.0, 2.0]], [[False, False]])
    out = masked_softmax_rows([[1.0, 2.0]], [[False, False]], allow_empty=True)
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


def test_softmax_large_logits_stay_finite():
    out = masked_softmax_rows([[1e4, 1e4 - 1.0, -1e4]], [[True, True, True]])
    assert np.all(np.isfinite(out))
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


@st.composite
def logits_and_mask(draw):
    rows = draw(st.integers(1, 5))
    cols = draw(st.integers(1, 7))
    x = draw(arrays(np.float64, (rows, cols), elements=finite))
    mask = draw(arrays(np.bool_, (rows, cols)))
    mask[np.arange(rows), draw(arrays(np.int64, rows, elements=st.integers(0, cols - 1)))] = True
    return x, mask


@given(logits_and_mask(), st.floats(-100, 100))
def test_softmax_properties(xm, shift):
    CASES["softmax"] += 1
    x, mask = xm
    out = masked_softmax_rows(x, mask)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out[~mask] == 0.0)
    shifted = masked_softmax_rows(np.where(mask, x + shift, x), mask)
    np.testing.assert_allclose(shifted, out, atol=1e-12)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    upstream = rng.standard_normal((3, 5))

    def f(z):
        return float(np.sum(masked_softmax_rows(z, mask) * upstream))

    analytic = softmax_backward(masked_softmax_rows(x, mask), upstream)
    assert max_relative_error(analytic, finite_diff_gradient(f, x)) < 1e-8


# --- layer norm -------------------------------------------------------------


def test_layer_norm_examples():
    d = 6
    ones, zeros = np.ones(d), np.zeros(d)
    np.testing.assert_array_equal(layer_norm(np.full(d, 4.2), ones, zeros), zeros)
    np.testing.assert_allclose(layer_norm([1.0, 3.0], np.ones(2), np.zeros(2)), [-1, 1], atol=1e-8)


def test_layer_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(np.ones(3), np.ones(4), np.zeros(3))


@given(arrays(np.float64, st.integers(2, 16), elements=finite))
def test_layer_norm_standardizes(x):
    if x.var() < 1e-4:
        return
    y = layer_norm(x, np.ones(x.size), np.zeros(x.size))
    assert abs(y.mean()) <= 1e-10
    # eps in the denominator shrinks the variance slightly below one
    assert y.var() == pytest.approx(x.var() / (x.var() + LN_EPS), rel=1e-9)


def test_layer_norm_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5))
    gamma, beta = rng.standard_normal(5), rng.standard_normal(5)
    upstream = rng.standard_normal((2, 3, 5))
    _, cache = layer_norm_forward(x, gamma, beta)
    dx, dg, db = layer_norm_backward(upstream, cache)
    assert max_relative_error(dx, finite_diff_gradient(lambda z: np.sum(layer_norm(z, gamma, beta) * upstream), x)) < 1e-7
    assert max_relative_error(dg, finite_diff_gradient(lambda g: np.sum(layer_norm(x, g, beta) * upstream), gamma)) < 1e-7
    assert max_relative_error(db, finite_diff_gradient(lambda b: np.sum(layer_norm(x, gamma, b) * upstream), beta)) < 1e-7


# --- Adam -------------------------------------------------------------------


def test_adam_zero_grad_is_identity():
    p = np.array([[1.0, -2.0], [0.5, 3.0]])
    new, state = adam_step(p, np.zeros_like(p), AdamState.fresh(p))
    np.testing.assert_array_equal(new, p)
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    rng = np.random.default_rng(2)
    p = rng.standard_normal((4, 3))
    g = rng.standard_normal((4, 3))
    new, _ = adam_step(p, g, AdamState.fresh(p, learning_rate=0.01))
    # |g| / (|g| + eps) differs from 1 by at most eps/|g|
    np.testing.assert_allclose(new - p, -0.01 * np.sign(g), atol=1e-8)


def test_adam_two_steps_scalar_recurrence():
    p = np.array([0.0])
    state = AdamState.fresh(p, learning_rate=0.001)
    for _ in range(2):
        p, state = adam_step(p, np.array([1.0]), state)
    assert p[0] == pytest.approx(-0.002, abs=1e-6)
    assert state.step == 2
    assert np.all(state.v >= 0)


def test_adam_rejects_non_finite_gradient():
    p = np.zeros(3)
    with pytest.raises(NonFiniteGradientError, match="b0.Wq"):
        adam_step(p, np.array([0.0, np.nan, 1.0]), AdamState.fresh(p), name="b0.Wq")


def test_adam_does_not_mutate_inputs():
    p = np.ones(3)
    st0 = AdamState.fresh(p)
    adam_step(p, np.ones(3), st0)
    np.testing.assert_array_equal(p, np.ones(3))
    np.testing.assert_array_equal(st0.m, np.zeros(3))


# --- finite differences -----------------------------------------------------


def test_finite_diff_examples():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(finite_diff_gradient(np.sum, x), np.ones((2, 3)), atol=1e-9)
    g = finite_diff_gradient(lambda z: float(z[0] ** 2), np.array([3.0]))
    assert g[0] == pytest.approx(6.0, abs=1e-6)
    # input untouched
    np.testing.assert_array_equal(x, np.arange(6.0).reshape(2, 3))


def test_max_relative_error_scale():
    assert max_relative_error(np.array([1000.0]), np.array([1001.0])) == pytest.approx(1 / 1001)
    assert max_relative_error(np.array([0.0]), np.array([1e-3])) == pytest.approx(1e-3)
