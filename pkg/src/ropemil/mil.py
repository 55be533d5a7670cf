"""MIL pooling heads and full-model assembly.

Two bag-level heads over encoded instance features:

* ABMIL pooling: a learnable class token attends over instances with
  multi-head dot-product attention (keys are a single learned projection,
  values are the instance features themselves), giving a slide embedding
  that a linear classifier maps to logits.
* DSMIL-style dual stream: a per-instance classifier proposes a critical
  instance; that instance's query attends over all instance queries, the
  attention-weighted value sum is classified, and instance-stream and
  bag-stream logits are averaged.

Model assembly wires an input projection (plus optional extra hidden
layers for the parameter-parity arms), an optional encoder stack, and one
of the heads. Ablation arms are named presets over that configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import params as ptree
from .attention import AttentionWorkspace
from .encoder import (EncoderParams, POSENC_MODES, init_encoder_params,
                      roformer_layer_bwd, roformer_layer_fwd)
from .errors import ConfigurationError, DimensionError, EmptyBagError
from .grid import PatchBag
from .numkernel import gelu_bwd, gelu_fwd, masked_row_softmax, masked_row_softmax_bwd, matmul
from .posenc import RopeTable


@dataclass
class AbmilParams:
    class_token: np.ndarray   # d_model
    key_proj: np.ndarray      # d_model x d_model
    classifier: np.ndarray    # d_model x K
    classifier_bias: np.ndarray
    n_heads: int = 8

    def __post_init__(self):
        d = self.class_token.shape[0]
        if self.key_proj.shape != (d, d) or self.classifier.shape[0] != d:
            raise DimensionError("AbmilParams shapes inconsistent")
        if d % self.n_heads != 0:
            raise ConfigurationError(f"d_model {d} not divisible by {self.n_heads} heads")


@dataclass
class DsmilParams:
    instance_classifier: np.ndarray       # d_model x K
    instance_classifier_bias: np.ndarray
    query_proj: np.ndarray                # d_model x d_model
    value_proj: np.ndarray                # d_model x d_model
    classifier: np.ndarray                # d_model x K
    classifier_bias: np.ndarray


@dataclass
class PoolOutput:
    """Bag-level result: embedding, per-head attention weights, logits."""

    slide_embedding: np.ndarray   # d_model
    attention: np.ndarray         # n_heads x N, zero on masked instances
    logits: np.ndarray            # K


def init_abmil_params(d_model: int, n_classes: int, n_heads: int,
                      rng: np.random.Generator, dtype=np.float32) -> AbmilParams:
    bound = 1.0 / np.sqrt(d_model)
    return AbmilParams(
        class_token=rng.uniform(-bound, bound, size=d_model).astype(dtype),
        key_proj=rng.uniform(-bound, bound, size=(d_model, d_model)).astype(dtype),
        classifier=rng.uniform(-bound, bound, size=(d_model, n_classes)).astype(dtype),
        classifier_bias=np.zeros(n_classes, dtype=dtype),
        n_heads=n_heads,
    )


def init_dsmil_params(d_model: int, n_classes: int, rng: np.random.Generator,
                      dtype=np.float32) -> DsmilParams:
    bound = 1.0 / np.sqrt(d_model)

    def w(shape):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return DsmilParams(
        instance_classifier=w((d_model, n_classes)),
        instance_classifier_bias=np.zeros(n_classes, dtype=dtype),
        query_proj=w((d_model, d_model)),
        value_proj=w((d_model, d_model)),
        classifier=w((d_model, n_classes)),
        classifier_bias=np.zeros(n_classes, dtype=dtype),
    )


def _check_pool_inputs(H, mask):
    H = np.asarray(H)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (H.shape[0],):
        raise DimensionError(f"mask length {mask.shape} vs {H.shape[0]} instances")
    if not mask.any():
        raise EmptyBagError("empty bag: no unmasked instances")
    Hs = H.copy()
    Hs[~mask] = 0
    return Hs, mask


def abmil_pool_fwd(H, pool: AbmilParams, mask):
    """Class-token attention pooling. Returns (PoolOutput, cache)."""
    Hs, mask = _check_pool_inputs(H, mask)
    d = pool.class_token.shape[0]
    if Hs.shape[1] != d:
        raise DimensionError(f"features width {Hs.shape[1]} vs head width {d}")
    n_heads = pool.n_heads
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    keys = matmul(Hs, pool.key_proj)

    n = Hs.shape[0]
    alpha = np.zeros((n_heads, n), dtype=Hs.dtype)
    z = np.zeros(d, dtype=Hs.dtype)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (keys[:, sl] @ pool.class_token[sl]) * scale
        alpha[h] = masked_row_softmax(scores[None, :], mask)[0]
        z[sl] = alpha[h] @ Hs[:, sl]
    logits = z @ pool.classifier + pool.classifier_bias
    out = PoolOutput(slide_embedding=z, attention=alpha, logits=logits)
    return out, (Hs, keys, alpha, z, mask, pool)


def abmil_pool(H, pool: AbmilParams, mask) -> PoolOutput:
    out, _ = abmil_pool_fwd(H, pool, mask)
    return out


def abmil_pool_bwd(cache, dlogits: np.ndarray):
    """Returns (dH, grads: AbmilParams)."""
    Hs, keys, alpha, z, mask, pool = cache
    d = z.shape[0]
    n_heads = pool.n_heads
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    dclassifier = np.outer(z, dlogits)
    dbias = dlogits.astype(z.dtype, copy=True)
    dz = pool.classifier @ dlogits

    dHs = np.zeros_like(Hs)
    dkeys = np.zeros_like(keys)
    dtoken = np.zeros_like(pool.class_token)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        dzh = dz[sl]
        dalpha = Hs[:, sl] @ dzh
        dHs[:, sl] += np.outer(alpha[h], dzh)
        dscores = masked_row_softmax_bwd(alpha[h][None, :], dalpha[None, :])[0]
        dkeys[:, sl] = np.outer(dscores, pool.class_token[sl]) * scale
        dtoken[sl] = (keys[:, sl].T @ dscores) * scale
    dkey_proj = matmul(Hs.T, dkeys)
    dHs += matmul(dkeys, pool.key_proj.T)
    dHs[~mask] = 0
    grads = replace(pool, class_token=dtoken, key_proj=dkey_proj,
                    classifier=dclassifier, classifier_bias=dbias)
    return dHs, grads


def dsmil_pool_fwd(H, pool: DsmilParams, mask):
    """Dual-stream pooling around the highest-scoring (critical) instance.

    Returns (PoolOutput, cache). The critical instance is the argmax of the
    per-instance classifier's strongest class logit over unmasked
    instances, ties resolved to the lowest index.
    """
    Hs, mask = _check_pool_inputs(H, mask)
    d = pool.query_proj.shape[0]
    inst_logits = matmul(Hs, pool.instance_classifier) + pool.instance_classifier_bias
    inst_scores = inst_logits.max(axis=1)
    neg = np.array(-np.inf, dtype=Hs.dtype)
    crit = int(np.argmax(np.where(mask, inst_scores, neg)))

    queries = matmul(Hs, pool.query_proj)
    scale = 1.0 / np.sqrt(d)
    att = (queries @ queries[crit]) * scale
    alpha = masked_row_softmax(att[None, :], mask)[0]
    values = matmul(Hs, pool.value_proj)
    z = alpha @ values

    # per-class max over unmasked instances (instance stream)
    masked_logits = np.where(mask[:, None], inst_logits, neg)
    inst_argmax = masked_logits.argmax(axis=0)
    inst_stream = masked_logits[inst_argmax, np.arange(inst_logits.shape[1])]
    bag_stream = z @ pool.classifier + pool.classifier_bias
    logits = 0.5 * (inst_stream + bag_stream)

    out = PoolOutput(slide_embedding=z, attention=alpha[None, :], logits=logits)
    cache = (Hs, inst_logits, inst_argmax, crit, queries, alpha, values, z, mask, pool)
    return out, cache


def dsmil_pool(H, pool: DsmilParams, mask) -> PoolOutput:
    out, _ = dsmil_pool_fwd(H, pool, mask)
    return out


def dsmil_pool_bwd(cache, dlogits: np.ndarray):
    """Returns (dH, grads: DsmilParams). Critical-instance selection and
    per-class argmax are treated as constants of the forward pass."""
    Hs, inst_logits, inst_argmax, crit, queries, alpha, values, z, mask, pool = cache
    d = pool.query_proj.shape[0]
    scale = 1.0 / np.sqrt(d)
    k = inst_logits.shape[1]

    dinst_stream = 0.5 * dlogits
    dbag = 0.5 * dlogits

    # bag stream
    dclassifier = np.outer(z, dbag)
    dclassifier_bias = dbag.astype(z.dtype, copy=True)
    dz = pool.classifier @ dbag

    dalpha = values @ dz
    dvalues = np.outer(alpha, dz)
    dvalue_proj = matmul(Hs.T, dvalues)
    dHs = matmul(dvalues, pool.value_proj.T)

    datt = masked_row_softmax_bwd(alpha[None, :], dalpha[None, :])[0]
    dqueries = np.outer(datt, queries[crit]) * scale
    dqueries[crit] += (queries.T @ datt) * scale
    dquery_proj = matmul(Hs.T, dqueries)
    dHs += matmul(dqueries, pool.query_proj.T)

    # instance stream: route each class gradient to its argmax instance
    dinst_logits = np.zeros_like(inst_logits)
    dinst_logits[inst_argmax, np.arange(k)] = dinst_stream
    dinst_classifier = matmul(Hs.T, dinst_logits)
    dinst_classifier_bias = dinst_logits.sum(axis=0)
    dHs += matmul(dinst_logits, pool.instance_classifier.T)

    dHs[~mask] = 0
    grads = replace(pool,
                    instance_classifier=dinst_classifier,
                    instance_classifier_bias=dinst_classifier_bias,
                    query_proj=dquery_proj,
                    value_proj=dvalue_proj,
                    classifier=dclassifier,
                    classifier_bias=dclassifier_bias)
    return dHs, grads


# ---------------------------------------------------------------------------
# model assembly

@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    n_classes: int
    d_model: int = 512
    n_heads: int = 8
    pool: str = "abmil"           # abmil | dsmil
    pool_heads: int = 8
    encoder_on: bool = False
    posenc_mode: str = "none"     # none | abs | rope | rope+abs
    n_layers: int = 1
    ffn_expansion: int = 4
    hidden_layers: int = 0        # extra d_model->d_model GELU layers after the input projection
    rope_base: float = 10000.0
    ln_eps: float = 1e-5
    dropout: float = 0.0          # encoder-layer dropout, training time only
    dtype: str = "float32"        # float32 | float64

    def __post_init__(self):
        if self.pool not in ("abmil", "dsmil"):
            raise ConfigurationError(f"unknown pooling head {self.pool!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.posenc_mode not in POSENC_MODES:
            raise ConfigurationError(f"unknown posenc_mode {self.posenc_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unknown dtype {self.dtype!r}")
        if not self.encoder_on and self.posenc_mode not in ("none", "abs"):
            raise ConfigurationError("rope requires the encoder to be enabled")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class LinearParams:
    W: np.ndarray
    b: np.ndarray


@dataclass
class ModelParams:
    proj: LinearParams
    hidden: list[LinearParams]
    encoder: list[EncoderParams]
    pool: AbmilParams | DsmilParams


def init_model_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype

    def linear(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return LinearParams(
            W=rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype),
            b=np.zeros(fan_out, dtype=dtype),
        )

    proj = linear(cfg.feature_dim, cfg.d_model)
    hidden = [linear(cfg.d_model, cfg.d_model) for _ in range(cfg.hidden_layers)]
    encoder = [
        init_encoder_params(cfg.d_model, cfg.n_heads, cfg.ffn_expansion, rng,
                            dtype, cfg.ln_eps)
        for _ in range(cfg.n_layers if cfg.encoder_on else 0)
    ]
    if cfg.pool == "abmil":
        pool = init_abmil_params(cfg.d_model, cfg.n_classes, cfg.pool_heads, rng, dtype)
    else:
        pool = init_dsmil_params(cfg.d_model, cfg.n_classes, rng, dtype)
    return ModelParams(proj=proj, hidden=hidden, encoder=encoder, pool=pool)


def model_param_count(cfg: ModelConfig) -> int:
    return ptree.param_count(init_model_params(cfg, seed=0))


def model_fwd(params: ModelParams, cfg: ModelConfig, features, coords, mask,
              kernel: str = "naive", ws: AttentionWorkspace | None = None,
              rope_table: RopeTable | None = None, dropout_rng=None):
    """Full forward pass over one bag's arrays. Returns (PoolOutput, cache).

    Pass a generator as dropout_rng to enable cfg.dropout (training mode);
    without one the forward is deterministic.
    """
    X = np.asarray(features, dtype=cfg.np_dtype)
    mask = np.asarray(mask, dtype=bool)
    X = X.copy()
    X[~mask] = 0
    if rope_table is None and "rope" in cfg.posenc_mode:
        rope_table = RopeTable(cfg.d_model // cfg.n_heads, cfg.rope_base)

    X0 = X
    X = matmul(X, params.proj.W) + params.proj.b
    X[~mask] = 0
    hidden_caches = []
    for lin in params.hidden:
        z = matmul(X, lin.W) + lin.b
        g, gcache = gelu_fwd(z)
        g[~mask] = 0
        hidden_caches.append((X, gcache))
        X = g

    enc_caches = []
    layer_mode = cfg.posenc_mode if cfg.encoder_on else "none"
    for layer in params.encoder:
        X, c = roformer_layer_fwd(X, layer, coords, mask, posenc_mode=layer_mode,
                                  kernel=kernel, ws=ws, rope_table=rope_table,
                                  dropout_p=cfg.dropout, dropout_rng=dropout_rng)
        enc_caches.append(c)
        # the absolute encoding is added once, before the first layer
        layer_mode = "rope" if "rope" in layer_mode else "none"

    if cfg.pool == "abmil":
        out, pool_cache = abmil_pool_fwd(X, params.pool, mask)
    else:
        out, pool_cache = dsmil_pool_fwd(X, params.pool, mask)
    cache = (X0, hidden_caches, enc_caches, pool_cache, params, cfg, mask)
    return out, cache


def model_bwd(cache, dlogits: np.ndarray):
    """Returns grads shaped like ModelParams (input gradient is discarded)."""
    X0, hidden_caches, enc_caches, pool_cache, params, cfg, mask = cache
    if cfg.pool == "abmil":
        dX, pool_grads = abmil_pool_bwd(pool_cache, dlogits)
    else:
        dX, pool_grads = dsmil_pool_bwd(pool_cache, dlogits)

    enc_grads = []
    for c in reversed(enc_caches):
        dX, g = roformer_layer_bwd(c, dX)
        enc_grads.append(g)
    enc_grads.reverse()

    hidden_grads = []
    for lin, (h_in, gcache) in zip(reversed(params.hidden), reversed(hidden_caches)):
        dz = gelu_bwd(gcache, dX)
        dz[~mask] = 0
        hidden_grads.append(LinearParams(W=matmul(h_in.T, dz), b=dz.sum(axis=0)))
        dX = matmul(dz, lin.W.T)
        dX[~mask] = 0
    hidden_grads.reverse()

    proj_grads = LinearParams(W=matmul(X0.T, dX), b=dX.sum(axis=0))
    return ModelParams(proj=proj_grads, hidden=hidden_grads,
                       encoder=enc_grads, pool=pool_grads)


def model_forward(params: ModelParams, cfg: ModelConfig, bag: PatchBag,
                  kernel: str = "naive", ws: AttentionWorkspace | None = None,
                  rope_table: RopeTable | None = None) -> PoolOutput:
    out, _ = model_fwd(params, cfg, bag.features, bag.grid_coords, bag.mask,
                       kernel=kernel, ws=ws, rope_table=rope_table)
    return out


# ---------------------------------------------------------------------------
# ablation arms

ARM_PRESETS: dict[str, dict] = {
    "abmil": dict(pool="abmil", encoder_on=False, posenc_mode="none", d_model=512),
    "abmil-2.1m": dict(pool="abmil", encoder_on=False, posenc_mode="none",
                       d_model=1024),
    "abmil-4.2m": dict(pool="abmil", encoder_on=False, posenc_mode="none",
                       d_model=1024, hidden_layers=2),
    "dsmil": dict(pool="dsmil", encoder_on=False, posenc_mode="none", d_model=512),
    "transformer-abmil": dict(pool="abmil", encoder_on=True, posenc_mode="none",
                              d_model=512),
    "vit-abmil": dict(pool="abmil", encoder_on=True, posenc_mode="abs", d_model=512),
    "ro-abmil": dict(pool="abmil", encoder_on=True, posenc_mode="rope", d_model=512),
    "rope+abs-abmil": dict(pool="abmil", encoder_on=True, posenc_mode="rope+abs",
                           d_model=512),
    "ro-dsmil": dict(pool="dsmil", encoder_on=True, posenc_mode="rope", d_model=512),
}


def arm_config(arm: str, feature_dim: int, n_classes: int, **overrides) -> ModelConfig:
    """Resolve an ablation-arm name (case-insensitive) to a ModelConfig."""
    key = arm.lower()
    if key not in ARM_PRESETS:
        raise ConfigurationError(
            f"unknown arm {arm!r}; expected one of {sorted(ARM_PRESETS)}")
    fields = dict(ARM_PRESETS[key])
    fields.update(overrides)
    return ModelConfig(feature_dim=feature_dim, n_classes=n_classes, **fields)
