"""Masked self-attention: quadratic reference and streaming kernel."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ropemil.attention import (AttentionWorkspace, MhsaParams, attend_naive,
                               attend_naive_bwd, attend_naive_fwd,
                               attend_streaming, init_mhsa_params, mhsa_bwd,
                               mhsa_forward, mhsa_fwd)
from ropemil.errors import ConfigurationError, DimensionError
from ropemil.numkernel import finite_difference_grad, masked_row_softmax
from ropemil.posenc import RopeTable


def random_qkv(n, d, seed, n_masked=0):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(n, d))
    K = rng.normal(size=(n, d))
    V = rng.normal(size=(n, d))
    mask = np.ones(n, dtype=bool)
    if n_masked:
        mask[rng.choice(n, size=n_masked, replace=False)] = False
    return Q, K, V, mask


def test_naive_matches_direct_softmax():
    Q, K, V, mask = random_qkv(6, 4, np.random.default_rng(0))
    scale = 0.5
    out = attend_naive(Q, K, V, mask, scale)
    probs = masked_row_softmax((Q @ K.T) * scale, mask)
    assert_allclose(out, probs @ V, atol=1e-12)


def test_single_instance_output_equals_value():
    Q, K, V, mask = random_qkv(1, 8, np.random.default_rng(1))
    out = attend_naive(Q, K, V, mask, 1.0)
    assert_allclose(out, V, atol=1e-12)


def test_masked_rows_are_zero_and_ignored():
    Q, K, V, mask = random_qkv(8, 4, seed=2, n_masked=3)
    # poisoned values on masked rows must not leak anywhere
    Q[~mask] = np.nan
    K[~mask] = np.nan
    V[~mask] = np.nan
    out = attend_naive(Q, K, V, mask, 0.3)
    assert np.all(out[~mask] == 0)
    assert np.all(np.isfinite(out[mask]))
    # result over the unmasked subset matches the dense computation on it
    sub = attend_naive(Q[mask], K[mask], V[mask], np.ones(mask.sum(), bool), 0.3)
    assert_allclose(out[mask], sub, atol=1e-12)


def test_streaming_matches_naive_on_chunk_grid():
    for n, seed in ((1, 3), (5, 4), (17, 5), (33, 6)):
        Q, K, V, mask = random_qkv(n, 8, seed=seed, n_masked=n // 5)
        ref = attend_naive(Q, K, V, mask, 0.35)
        for bq, bk in ((1, 1), (2, 3), (7, 5), (16, 16), (max(n, 1), max(n, 1))):
            ws = AttentionWorkspace(query_chunk=bq, key_chunk=bk)
            got = attend_streaming(Q, K, V, mask, 0.35, ws)
            assert_allclose(got, ref, rtol=1e-12, atol=1e-13,
                            err_msg=f"n={n} chunks=({bq},{bk})")


def test_streaming_scratch_is_chunk_bounded():
    # scratch depends on chunk sizes and head_dim, never on N
    ws = AttentionWorkspace(query_chunk=4, key_chunk=4)
    for n in (8, 64, 256):
        Q, K, V, mask = random_qkv(n, 16, np.random.default_rng(7))
        attend_streaming(Q, K, V, mask, 0.25, ws)
    bq = bk = 4
    itemsize = 8
    expected = (bq * bk + bq * 16 + 2 * bk * 16 + 2 * bq * 16
                + 6 * bq) * itemsize + bq  # bool row flags
    assert ws.peak_scratch_bytes == expected


def test_streaming_all_keys_masked_in_leading_chunks():
    # first chunks fully masked: running max starts at -inf and must recover
    n = 12
    Q, K, V, mask = random_qkv(n, 4, np.random.default_rng(8))
    mask[:6] = False
    ws = AttentionWorkspace(query_chunk=3, key_chunk=3)
    got = attend_streaming(Q, K, V, mask, 1.0, ws)
    assert_allclose(got, attend_naive(Q, K, V, mask, 1.0), atol=1e-12)


def test_naive_backward_matches_fd():
    Q, K, V, mask = random_qkv(5, 3, seed=9, n_masked=1)
    dout = np.random.default_rng(10).normal(size=(5, 3))
    dout[~mask] = 0
    out, cache = attend_naive_fwd(Q, K, V, mask, 0.7)
    dQ, dK, dV = attend_naive_bwd(cache, dout)

    def loss(q_flat):
        o = attend_naive(q_flat.reshape(5, 3), K, V, mask, 0.7)
        return float((o * dout).sum())

    fd = finite_difference_grad(loss, Q.ravel()).reshape(5, 3)
    assert_allclose(dQ, fd, atol=1e-7)

    def loss_k(k_flat):
        o = attend_naive(Q, k_flat.reshape(5, 3), V, mask, 0.7)
        return float((o * dout).sum())

    assert_allclose(dK, finite_difference_grad(loss_k, K.ravel()).reshape(5, 3),
                    atol=1e-7)

    def loss_v(v_flat):
        o = attend_naive(Q, K, v_flat.reshape(5, 3), mask, 0.7)
        return float((o * dout).sum())

    assert_allclose(dV, finite_difference_grad(loss_v, V.ravel()).reshape(5, 3),
                    atol=1e-7)


def test_mhsa_streaming_equals_naive():
    d_model, heads, n = 16, 4, 11
    params = init_mhsa_params(d_model, heads, np.random.default_rng(0), dtype=np.float64)
    rng = np.random.default_rng(11)
    X = rng.normal(size=(n, d_model))
    coords = rng.integers(0, 6, size=(n, 2))
    mask = np.ones(n, dtype=bool)
    mask[[2, 9]] = False
    for mode in ("none", "rope"):
        a = mhsa_forward(X, params, coords, mask, posenc_mode=mode, kernel="naive")
        ws = AttentionWorkspace(query_chunk=3, key_chunk=4)
        b = mhsa_forward(X, params, coords, mask, posenc_mode=mode,
                         kernel="streaming", ws=ws)
        assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_mhsa_rope_translation_invariance():
    d_model, heads, n = 16, 2, 7
    params = init_mhsa_params(d_model, heads, np.random.default_rng(1), dtype=np.float64)
    rng = np.random.default_rng(12)
    X = rng.normal(size=(n, d_model))
    coords = rng.integers(0, 5, size=(n, 2))
    mask = np.ones(n, dtype=bool)
    base = mhsa_forward(X, params, coords, mask, posenc_mode="rope")
    shifted = mhsa_forward(X, params, coords + np.array([9, 4]), mask,
                           posenc_mode="rope")
    assert_allclose(shifted, base, atol=1e-10)


def test_mhsa_rope_sensitive_to_relative_geometry():
    d_model, heads, n = 16, 2, 5
    params = init_mhsa_params(d_model, heads, np.random.default_rng(2), dtype=np.float64)
    rng = np.random.default_rng(13)
    X = rng.normal(size=(n, d_model))
    mask = np.ones(n, dtype=bool)
    near = np.column_stack([np.arange(n), np.zeros(n, int)])
    far = near * 7
    a = mhsa_forward(X, params, near, mask, posenc_mode="rope")
    b = mhsa_forward(X, params, far, mask, posenc_mode="rope")
    assert np.abs(a - b).max() > 1e-6


def test_mhsa_backward_matches_fd():
    d_model, heads, n = 8, 2, 6
    params = init_mhsa_params(d_model, heads, np.random.default_rng(3), dtype=np.float64)
    rng = np.random.default_rng(14)
    X = rng.normal(size=(n, d_model))
    coords = rng.integers(0, 4, size=(n, 2))
    mask = np.ones(n, dtype=bool)
    mask[4] = False
    dout = rng.normal(size=(n, d_model))
    dout[~mask] = 0
    out, cache = mhsa_fwd(X, params, coords, mask, posenc_mode="rope")
    dX, grads = mhsa_bwd(cache, dout)

    def loss_x(flat):
        o = mhsa_forward(flat.reshape(n, d_model), params, coords, mask,
                         posenc_mode="rope")
        return float((o * dout).sum())

    assert_allclose(dX, finite_difference_grad(loss_x, X.ravel()).reshape(n, d_model),
                    atol=1e-7)

    def loss_wq(flat):
        import dataclasses
        p2 = dataclasses.replace(params, W_q=flat.reshape(d_model, d_model))
        o = mhsa_forward(X, p2, coords, mask, posenc_mode="rope")
        return float((o * dout).sum())

    fd_wq = finite_difference_grad(loss_wq, params.W_q.ravel()).reshape(d_model, d_model)
    assert_allclose(grads.W_q, fd_wq, atol=1e-7)


def test_permutation_equivariance():
    # reordering instances reorders rows of the output identically
    d_model, heads, n = 12, 3, 9
    params = init_mhsa_params(d_model, heads, np.random.default_rng(4), dtype=np.float64)
    rng = np.random.default_rng(15)
    X = rng.normal(size=(n, d_model))
    coords = rng.integers(0, 8, size=(n, 2))
    mask = np.ones(n, dtype=bool)
    perm = rng.permutation(n)
    base = mhsa_forward(X, params, coords, mask, posenc_mode="rope")
    permuted = mhsa_forward(X[perm], params, coords[perm], mask[perm],
                            posenc_mode="rope")
    assert_allclose(permuted, base[perm], atol=1e-12)


def test_mhsa_rejects_bad_coords_shape():
    params = init_mhsa_params(8, 2, np.random.default_rng(5))
    X = np.zeros((4, 8))
    with pytest.raises(DimensionError):
        mhsa_forward(X, params, np.zeros((3, 2), int), np.ones(4, bool),
                     posenc_mode="rope")


def test_workspace_rejects_bad_chunks():
    with pytest.raises(ConfigurationError):
        AttentionWorkspace(query_chunk=0)


def test_mhsa_rejects_unknown_kernel():
    params = init_mhsa_params(8, 2, np.random.default_rng(6))
    with pytest.raises(ConfigurationError):
        mhsa_forward(np.zeros((2, 8)), params, np.zeros((2, 2), int),
                     np.ones(2, bool), kernel="fused")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 24), st.integers(1, 8), st.integers(1, 8),
       st.integers(0, 10 ** 6))
def test_streaming_exactness_property(n, bq, bk, seed):
    Q, K, V, mask = random_qkv(n, 4, seed=seed, n_masked=min(n - 1, n // 3))
    ref = attend_naive(Q, K, V, mask, 0.5)
    got = attend_streaming(Q, K, V, mask, 0.5, AttentionWorkspace(bq, bk))
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-13)
