"""Numeric primitives: softmax, cross-entropy, layer norm, GELU, matmul."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import norm

from ropemil.errors import DimensionError
from ropemil.numkernel import (cross_entropy_loss, finite_difference_grad,
                               gelu_bwd, gelu_fwd, layer_norm, layer_norm_bwd,
                               layer_norm_fwd, masked_row_softmax,
                               masked_row_softmax_bwd, matmul, require_matrix,
                               softmax_1d)


def test_softmax_1d_known_values():
    # sum-normalized exp([1,2,3]) computed at high precision
    out = softmax_1d([1.0, 2.0, 3.0])
    assert_allclose(out, [0.09003057317038046, 0.24472847105479764,
                          0.6652409557748219], atol=1e-12)
    assert_allclose(out.sum(), 1.0, atol=1e-15)


def test_softmax_1d_shift_invariance():
    x = np.array([5.0, -3.0, 0.25, 11.0])
    assert_allclose(softmax_1d(x), softmax_1d(x + 1234.5), atol=1e-12)


def test_softmax_1d_extreme_logits_finite():
    out = softmax_1d([1e4, 0.0, -1e4])
    assert np.all(np.isfinite(out))
    assert_allclose(out[0], 1.0, atol=1e-12)


def test_cross_entropy_known_value():
    # -log softmax([1,2,3])[1] = log(e + e^2 + e^3) - 2
    loss = cross_entropy_loss(np.array([1.0, 2.0, 3.0]), 1)
    assert_allclose(loss, 1.4076059644443804, atol=1e-12)


def test_cross_entropy_grad_is_softmax_minus_onehot():
    logits = np.array([0.3, -1.2, 2.0])
    loss, grad = cross_entropy_loss(logits, 2, with_grad=True)
    expected = softmax_1d(logits)
    expected[2] -= 1.0
    assert_allclose(grad, expected, atol=1e-12)
    assert_allclose(grad.sum(), 0.0, atol=1e-12)


def test_cross_entropy_matches_finite_difference():
    logits = np.array([0.1, 0.9, -0.4, 0.0])
    _, grad = cross_entropy_loss(logits, 0, with_grad=True)
    fd = finite_difference_grad(lambda x: cross_entropy_loss(x, 0), logits)
    assert_allclose(grad, fd, atol=1e-8)


def test_masked_row_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(4, 6))
    mask = np.array([True, True, False, True, False, True])
    A = masked_row_softmax(S, mask)
    assert_allclose(A.sum(axis=1), np.ones(4), atol=1e-12)
    assert np.all(A[:, ~mask] == 0)


def test_masked_row_softmax_single_unmasked_column():
    S = np.full((3, 5), -2.0)
    mask = np.zeros(5, dtype=bool)
    mask[3] = True
    A = masked_row_softmax(S, mask)
    expected = np.zeros((3, 5))
    expected[:, 3] = 1.0
    assert_allclose(A, expected, atol=0)


def test_masked_row_softmax_ignores_poisoned_columns():
    S = np.array([[0.0, np.nan, 1.0]])
    mask = np.array([True, False, True])
    A = masked_row_softmax(np.where(mask, S, 0.0), mask)
    assert np.all(np.isfinite(A))


def test_masked_row_softmax_backward_matches_fd():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(3, 5))
    mask = np.array([True, False, True, True, True])
    dA = rng.normal(size=(3, 5))
    dA[:, ~mask] = 0
    A = masked_row_softmax(S, mask)
    dS = masked_row_softmax_bwd(A, dA)

    def f(flat):
        return float((masked_row_softmax(flat.reshape(3, 5), mask) * dA).sum())

    fd = finite_difference_grad(f, S.ravel()).reshape(3, 5)
    assert_allclose(dS, fd, atol=1e-7)


def test_layer_norm_zero_mean_unit_variance():
    rng = np.random.default_rng(2)
    X = rng.normal(loc=3.0, scale=5.0, size=(7, 16))
    out = layer_norm(X, np.ones(16), np.zeros(16), eps=1e-12)
    assert_allclose(out.mean(axis=1), np.zeros(7), atol=1e-10)
    assert_allclose(out.std(axis=1), np.ones(7), atol=1e-6)


def test_layer_norm_affine_params_applied():
    X = np.array([[1.0, 2.0, 3.0, 4.0]])
    gamma = np.array([2.0, 2.0, 2.0, 2.0])
    beta = np.array([0.5, 0.5, 0.5, 0.5])
    base = layer_norm(X, np.ones(4), np.zeros(4), eps=1e-12)
    out = layer_norm(X, gamma, beta, eps=1e-12)
    assert_allclose(out, 2.0 * base + 0.5, atol=1e-12)


def test_layer_norm_backward_matches_fd():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(4, 8))
    gamma = rng.normal(size=8)
    beta = rng.normal(size=8)
    dout = rng.normal(size=(4, 8))
    _, cache = layer_norm_fwd(X, gamma, beta, 1e-5)
    dX, dgamma, dbeta = layer_norm_bwd(cache, dout)

    def loss(x_flat):
        return float((layer_norm(x_flat.reshape(4, 8), gamma, beta, 1e-5) * dout).sum())

    assert_allclose(dX, finite_difference_grad(loss, X.ravel()).reshape(4, 8),
                    atol=1e-7)

    def loss_g(g):
        return float((layer_norm(X, g, beta, 1e-5) * dout).sum())

    assert_allclose(dgamma, finite_difference_grad(loss_g, gamma), atol=1e-7)
    assert_allclose(dbeta, dout.sum(axis=0), atol=1e-12)


def test_gelu_matches_gaussian_cdf_form():
    x = np.linspace(-4, 4, 33)
    out, _ = gelu_fwd(x)
    assert_allclose(out, x * norm.cdf(x), atol=1e-12)


def test_gelu_fixed_points():
    out, _ = gelu_fwd(np.array([0.0, 1.0, -1.0]))
    # x * Phi(x) at 0, 1, -1
    assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707],
                    atol=1e-12)


def test_gelu_backward_matches_fd():
    x = np.linspace(-3, 3, 25)
    dout = np.cos(x)
    _, cache = gelu_fwd(x)
    grad = gelu_bwd(cache, dout)
    fd = finite_difference_grad(lambda v: float((gelu_fwd(v)[0] * dout).sum()), x)
    assert_allclose(grad, fd, atol=1e-8)


def test_matmul_matches_numpy():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(5, 7))
    B = rng.normal(size=(7, 3))
    assert_allclose(matmul(A, B), A @ B, rtol=1e-12)


def test_require_matrix_rejects_vectors():
    with pytest.raises(DimensionError):
        require_matrix(np.zeros(3), "features")


def test_finite_difference_grad_quadratic():
    # grad of x^T A x is (A + A^T) x
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4))
    x = rng.normal(size=4)
    fd = finite_difference_grad(lambda v: float(v @ A @ v), x)
    assert_allclose(fd, (A + A.T) @ x, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_simplex_property(logits):
    out = softmax_1d(np.array(logits))
    assert np.all(out >= 0)
    assert_allclose(out.sum(), 1.0, atol=1e-9)
