"""Pre-norm encoder layer: forward contracts, gradients, dropout."""

import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ropemil.attention import AttentionWorkspace
from ropemil.encoder import (EncoderParams, encoder_param_count,
                             init_encoder_params, roformer_layer_bwd,
                             roformer_layer_forward, roformer_layer_fwd)
from ropemil.errors import ConfigurationError
from ropemil.numkernel import finite_difference_grad
from ropemil.params import tree_arrays


def make_layer(d_model=8, heads=2, expansion=2, seed=0):
    rng = np.random.default_rng(seed)
    return init_encoder_params(d_model, heads, expansion, rng, dtype=np.float64)


def make_inputs(n=7, d_model=8, seed=1, n_masked=2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d_model))
    coords = rng.integers(0, 6, size=(n, 2))
    mask = np.ones(n, dtype=bool)
    if n_masked:
        mask[rng.choice(n, n_masked, replace=False)] = False
    X[~mask] = np.nan  # poisoned padding must never propagate
    return X, coords, mask


def test_param_count_formula():
    d, r = 8, 2
    params = make_layer(d, 2, r)
    total = sum(a.size for _, a in tree_arrays(params))
    assert total == encoder_param_count(d, 2, r)
    assert encoder_param_count(d, 2, r) == 4 * d * d + 2 * r * d * d + r * d + 5 * d


def test_masked_rows_stay_zero():
    params = make_layer()
    X, coords, mask = make_inputs()
    for mode in ("none", "abs", "rope", "rope+abs"):
        out = roformer_layer_forward(X, params, coords, mask, posenc_mode=mode)
        assert np.all(out[~mask] == 0), mode
        assert np.all(np.isfinite(out[mask])), mode


def test_residual_path_present():
    # with zeroed weights the layer must reduce to the identity on unmasked rows
    params = make_layer()
    for _, arr in tree_arrays(params):
        arr[:] = 0
    params.ln1_gamma[:] = 1
    params.ln2_gamma[:] = 1
    X, coords, mask = make_inputs()
    out = roformer_layer_forward(X, params, coords, mask, posenc_mode="none")
    expected = np.where(mask[:, None], np.nan_to_num(X), 0.0)
    assert_allclose(out, expected, atol=1e-12)


def test_streaming_kernel_matches_naive():
    params = make_layer()
    X, coords, mask = make_inputs()
    a = roformer_layer_forward(X, params, coords, mask, posenc_mode="rope",
                               kernel="naive")
    ws = AttentionWorkspace(query_chunk=2, key_chunk=3)
    b = roformer_layer_forward(X, params, coords, mask, posenc_mode="rope",
                               kernel="streaming", ws=ws)
    assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_rope_mode_translation_invariant_abs_mode_not():
    params = make_layer()
    X, coords, mask = make_inputs(n_masked=0)
    shift = np.array([11, 6])
    rope_a = roformer_layer_forward(X, params, coords, mask, posenc_mode="rope")
    rope_b = roformer_layer_forward(X, params, coords + shift, mask,
                                    posenc_mode="rope")
    assert_allclose(rope_a, rope_b, atol=1e-10)
    abs_a = roformer_layer_forward(X, params, coords, mask, posenc_mode="abs")
    abs_b = roformer_layer_forward(X, params, coords + shift, mask,
                                   posenc_mode="abs")
    assert np.abs(abs_a - abs_b).max() > 1e-3


def test_unknown_posenc_mode_rejected():
    params = make_layer()
    X, coords, mask = make_inputs()
    with pytest.raises(ConfigurationError):
        roformer_layer_forward(X, params, coords, mask, posenc_mode="learned")


def test_backward_matches_fd_all_modes():
    X, coords, mask = make_inputs(n=6, n_masked=1)
    dout = np.random.default_rng(5).normal(size=X.shape)
    dout[~mask] = 0
    for mode in ("none", "abs", "rope", "rope+abs"):
        params = make_layer(seed=3)
        out, cache = roformer_layer_fwd(X, params, coords, mask, posenc_mode=mode)
        dX, grads = roformer_layer_bwd(cache, dout)

        def loss_x(flat):
            o = roformer_layer_forward(flat.reshape(X.shape), params, coords,
                                       mask, posenc_mode=mode)
            return float((o * dout).sum())

        x0 = np.nan_to_num(X)
        fd = finite_difference_grad(loss_x, x0.ravel()).reshape(X.shape)
        assert_allclose(np.where(mask[:, None], dX, 0),
                        np.where(mask[:, None], fd, 0), atol=1e-7,
                        err_msg=mode)

        def loss_w(flat):
            p2 = dataclasses.replace(params, ffn_in=flat.reshape(params.ffn_in.shape))
            o = roformer_layer_forward(X, p2, coords, mask, posenc_mode=mode)
            return float((o * dout).sum())

        fd_w = finite_difference_grad(loss_w, params.ffn_in.ravel())
        assert_allclose(grads.ffn_in.ravel(), fd_w, atol=1e-7, err_msg=mode)


def test_dropout_zero_equals_no_generator():
    params = make_layer()
    X, coords, mask = make_inputs()
    base, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope")
    with_rng, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope",
                                     dropout_p=0.0,
                                     dropout_rng=np.random.default_rng(0))
    assert_allclose(base, with_rng, atol=0)


def test_dropout_without_generator_is_inert():
    # inference path: dropout probability alone must not change the output
    params = make_layer()
    X, coords, mask = make_inputs()
    base, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope")
    out, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope",
                                dropout_p=0.5)
    assert_allclose(base, out, atol=0)


def test_dropout_is_deterministic_given_seed():
    params = make_layer()
    X, coords, mask = make_inputs()
    a, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope",
                              dropout_p=0.4,
                              dropout_rng=np.random.default_rng(7))
    b, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope",
                              dropout_p=0.4,
                              dropout_rng=np.random.default_rng(7))
    assert_allclose(a, b, atol=0)
    c, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope",
                              dropout_p=0.4,
                              dropout_rng=np.random.default_rng(8))
    assert np.abs(a - c).max() > 0


def test_dropout_backward_matches_fd():
    params = make_layer(seed=9)
    X, coords, mask = make_inputs(n=6, n_masked=1)
    dout = np.random.default_rng(10).normal(size=X.shape)
    dout[~mask] = 0
    out, cache = roformer_layer_fwd(X, params, coords, mask, posenc_mode="rope",
                                    dropout_p=0.3,
                                    dropout_rng=np.random.default_rng(11))
    dX, grads = roformer_layer_bwd(cache, dout)

    def loss_w(flat):
        p2 = dataclasses.replace(params, ffn_out=flat.reshape(params.ffn_out.shape))
        # a fresh generator with the same seed replays the same masks
        o, _ = roformer_layer_fwd(X, p2, coords, mask, posenc_mode="rope",
                                  dropout_p=0.3,
                                  dropout_rng=np.random.default_rng(11))
        return float((o * dout).sum())

    fd = finite_difference_grad(loss_w, params.ffn_out.ravel())
    assert_allclose(grads.ffn_out.ravel(), fd, atol=1e-7)


def test_dropout_rejects_bad_probability():
    params = make_layer()
    X, coords, mask = make_inputs()
    with pytest.raises(ConfigurationError):
        roformer_layer_fwd(X, params, coords, mask, dropout_p=1.0,
                           dropout_rng=np.random.default_rng(0))


def test_encoder_params_reject_inconsistent_ffn():
    params = make_layer()
    with pytest.raises(Exception):
        EncoderParams(
            mhsa=params.mhsa,
            ffn_in=np.zeros((8, 16)),
            ffn_in_bias=np.zeros(16),
            ffn_out=np.zeros((12, 8)),
            ffn_out_bias=np.zeros(8),
            ln1_gamma=np.ones(8), ln1_beta=np.zeros(8),
            ln2_gamma=np.ones(8), ln2_beta=np.zeros(8),
        )
