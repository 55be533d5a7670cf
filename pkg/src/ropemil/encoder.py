"""Transformer encoder layer over a sparse token grid.

Pre-norm residual block: masked multi-head self-attention (rotary position
encoding on queries/keys when requested) followed by a GELU feed-forward,
each behind its own layer norm. An absolute sin-cos encoding can be added
to the token features on entry for the ablation arms. Masked rows enter
zero and leave zero; both residual branches are zeroed on masked rows so
padding never leaks into real tokens or parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionWorkspace, MhsaParams, init_mhsa_params, mhsa_bwd, mhsa_fwd
from .errors import ConfigurationError, DimensionError
from .numkernel import gelu_bwd, gelu_fwd, layer_norm_bwd, layer_norm_fwd, matmul
from .posenc import RopeTable, sincos_abs_2d

POSENC_MODES = ("none", "abs", "rope", "rope+abs")


@dataclass
class EncoderParams:
    """Weights of one encoder layer."""

    mhsa: MhsaParams
    ffn_in: np.ndarray      # d_model x (r * d_model)
    ffn_in_bias: np.ndarray
    ffn_out: np.ndarray     # (r * d_model) x d_model
    ffn_out_bias: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ln_eps: float = 1e-5

    def __post_init__(self):
        d = self.mhsa.d_model
        hidden = self.ffn_in.shape[1]
        if self.ffn_in.shape[0] != d or self.ffn_out.shape != (hidden, d):
            raise DimensionError(
                f"FFN shapes inconsistent: {self.ffn_in.shape} -> {self.ffn_out.shape}"
            )
        if hidden % d != 0:
            raise ConfigurationError(
                f"FFN hidden width {hidden} must be a multiple of d_model {d}"
            )

    @property
    def d_model(self) -> int:
        return self.mhsa.d_model

    @property
    def expansion(self) -> int:
        return self.ffn_in.shape[1] // self.mhsa.d_model


def init_encoder_params(d_model: int, n_heads: int, expansion: int,
                        rng: np.random.Generator, dtype=np.float32,
                        ln_eps: float = 1e-5) -> EncoderParams:
    hidden = expansion * d_model

    def w(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return EncoderParams(
        mhsa=init_mhsa_params(d_model, n_heads, rng, dtype),
        ffn_in=w(d_model, (d_model, hidden)),
        ffn_in_bias=np.zeros(hidden, dtype=dtype),
        ffn_out=w(hidden, (hidden, d_model)),
        ffn_out_bias=np.zeros(d_model, dtype=dtype),
        ln1_gamma=np.ones(d_model, dtype=dtype),
        ln1_beta=np.zeros(d_model, dtype=dtype),
        ln2_gamma=np.ones(d_model, dtype=dtype),
        ln2_beta=np.zeros(d_model, dtype=dtype),
        ln_eps=ln_eps,
    )


def encoder_param_count(d_model: int, n_heads: int, expansion: int) -> int:
    """Closed-form trainable parameter count of one layer.

    4*d^2 attention projections, 2*r*d^2 FFN weights plus biases, and two
    affine layer norms.
    """
    d, r = d_model, expansion
    return 4 * d * d + 2 * r * d * d + r * d + d + 4 * d


def roformer_layer_fwd(X, params: EncoderParams, coords, mask,
                       posenc_mode: str = "rope", kernel: str = "naive",
                       ws: AttentionWorkspace | None = None,
                       rope_table: RopeTable | None = None,
                       dropout_p: float = 0.0, dropout_rng=None):
    """One pre-norm encoder layer. Returns (out, cache).

    posenc_mode: none | abs | rope | rope+abs. "abs" adds the absolute
    sin-cos encoding to the inputs; "rope" rotates per-head queries/keys.

    Inverted dropout on both residual branches when dropout_p > 0 and a
    generator is supplied; inference callers simply omit the generator.
    """
    if posenc_mode not in POSENC_MODES:
        raise ConfigurationError(f"unknown posenc_mode {posenc_mode!r}")
    X = np.asarray(X)
    mask = np.asarray(mask, dtype=bool)
    X0 = X.copy()
    X0[~mask] = 0
    if "abs" in posenc_mode:
        coords = np.asarray(coords)
        if coords.shape != (X.shape[0], 2):
            raise DimensionError(
                f"coords shape {coords.shape} vs {X.shape[0]} rows of X")
        X0 = X0 + sincos_abs_2d(coords, X.shape[1]).astype(X.dtype)
        X0[~mask] = 0
    mhsa_mode = "rope" if "rope" in posenc_mode else "none"

    drop = dropout_p > 0.0 and dropout_rng is not None
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigurationError(f"dropout_p must be in [0, 1), got {dropout_p}")
    keep = 1.0 - dropout_p

    a_in, ln1_cache = layer_norm_fwd(X0, params.ln1_gamma, params.ln1_beta, params.ln_eps)
    attn_out, mhsa_cache = mhsa_fwd(a_in, params.mhsa, coords, mask,
                                    posenc_mode=mhsa_mode, kernel=kernel,
                                    ws=ws, rope_table=rope_table)
    drop_attn = None
    if drop:
        drop_attn = (dropout_rng.random(attn_out.shape) < keep).astype(X.dtype) / keep
        attn_out = attn_out * drop_attn
    h1 = X0 + attn_out  # attn_out is already zero on masked rows

    f_in, ln2_cache = layer_norm_fwd(h1, params.ln2_gamma, params.ln2_beta, params.ln_eps)
    z1 = matmul(f_in, params.ffn_in) + params.ffn_in_bias
    g, gelu_cache = gelu_fwd(z1)
    z2 = matmul(g, params.ffn_out) + params.ffn_out_bias
    drop_ffn = None
    if drop:
        drop_ffn = (dropout_rng.random(z2.shape) < keep).astype(X.dtype) / keep
        z2 = z2 * drop_ffn
    z2[~mask] = 0
    out = h1 + z2

    cache = (ln1_cache, mhsa_cache, ln2_cache, gelu_cache, f_in, g, params, mask,
             drop_attn, drop_ffn)
    return out, cache


def roformer_layer_forward(X, params: EncoderParams, coords, mask,
                           posenc_mode: str = "rope", kernel: str = "naive",
                           ws: AttentionWorkspace | None = None,
                           rope_table: RopeTable | None = None) -> np.ndarray:
    out, _ = roformer_layer_fwd(X, params, coords, mask, posenc_mode, kernel,
                                ws, rope_table)
    return out


def roformer_layer_bwd(cache, dout: np.ndarray):
    """Returns (dX, grads) with grads shaped like EncoderParams."""
    (ln1_cache, mhsa_cache, ln2_cache, gelu_cache, f_in, g, params, mask,
     drop_attn, drop_ffn) = cache
    dout = dout.copy()
    dout[~mask] = 0

    # FFN branch
    dz2 = dout.copy()
    dz2[~mask] = 0
    if drop_ffn is not None:
        dz2 = dz2 * drop_ffn
    dffn_out = matmul(g.T, dz2)
    dffn_out_bias = dz2.sum(axis=0)
    dg = matmul(dz2, params.ffn_out.T)
    dz1 = gelu_bwd(gelu_cache, dg)
    dffn_in = matmul(f_in.T, dz1)
    dffn_in_bias = dz1.sum(axis=0)
    df_in = matmul(dz1, params.ffn_in.T)
    dh1_ln, dln2_gamma, dln2_beta = layer_norm_bwd(ln2_cache, df_in)
    dh1 = dout + dh1_ln

    # attention branch
    dattn = dh1.copy()
    dattn[~mask] = 0
    if drop_attn is not None:
        dattn = dattn * drop_attn
    da_in, mhsa_grads = mhsa_bwd(mhsa_cache, dattn)
    dx_ln, dln1_gamma, dln1_beta = layer_norm_bwd(ln1_cache, da_in)
    dX = dh1 + dx_ln
    dX[~mask] = 0

    grads = replace(
        params,
        mhsa=mhsa_grads,
        ffn_in=dffn_in,
        ffn_in_bias=dffn_in_bias,
        ffn_out=dffn_out,
        ffn_out_bias=dffn_out_bias,
        ln1_gamma=dln1_gamma,
        ln1_beta=dln1_beta,
        ln2_gamma=dln2_gamma,
        ln2_beta=dln2_beta,
    )
    return dX, grads
