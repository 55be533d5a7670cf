"""Dense linear-algebra primitives with analytic gradients.

All trainable modules in this package are built from the handful of
operations defined here: matrix product, masked row softmax, layer
normalization, GELU and cross-entropy. Each differentiable operation comes
in a ``*_fwd`` / ``*_bwd`` pair: the forward returns its output together
with a cache, the backward consumes the cache and the upstream gradient.
There is no general autodiff graph; the compositions used by the encoder
and pooling heads wire these pairs together by hand.

Two float widths are supported. float64 is the test width: ``matmul``
guarantees a fixed left-to-right accumulation order per output element, so
results are bit-reproducible and match a scalar triple-loop oracle exactly.
float32 is the training/benchmark width and dispatches to BLAS.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DegenerateRowWarning, DimensionError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

# Above this element count the ordered float64 matmul falls back from one
# vectorized cumsum to a k-loop of outer products (same summation order,
# O(rows*cols) memory instead of O(rows*cols*inner)).
_ORDERED_CUMSUM_LIMIT = 1 << 22


@dataclass
class GradPair:
    """A value and the gradient of some scalar objective w.r.t. it."""

    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if np.shape(self.value) != np.shape(self.grad):
            raise DimensionError(
                f"GradPair shapes differ: value {np.shape(self.value)} "
                f"vs grad {np.shape(self.grad)}"
            )


def require_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate a 2D float array with finite entries and return it."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected 2 dimensions, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name}: contains non-finite entries")
    return a


def _matmul_ordered(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with exact left-to-right accumulation per element."""
    m, k = a.shape
    n = b.shape[1]
    if m * n * k <= _ORDERED_CUMSUM_LIMIT:
        if k == 0:
            return np.zeros((m, n), dtype=np.result_type(a, b))
        prods = a[:, None, :] * b.T[None, :, :]
        # cumsum is sequential along the axis, unlike np.sum's pairwise tree
        return np.cumsum(prods, axis=2)[:, :, -1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(k):
        out += np.outer(a[:, i], b[i, :])
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``.

    float64 operands take a fixed-order accumulation path (bitwise equal to
    a scalar triple loop); float32 goes through BLAS.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul: operands must be 2D, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ: {a.shape} x {b.shape}"
        )
    if a.dtype == np.float64 or b.dtype == np.float64:
        return _matmul_ordered(a, b)
    return a @ b


def masked_row_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over unmasked columns only.

    Masked positions output exactly 0. Rows whose every position is masked
    come out all-zero and a DegenerateRowWarning is emitted; callers that
    cannot tolerate such rows must check the mask themselves.
    """
    scores = np.asarray(scores)
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim != 2:
        raise DimensionError(f"masked_row_softmax: scores must be 2D, got {scores.shape}")
    if mask.shape != (scores.shape[1],):
        raise DimensionError(
            f"masked_row_softmax: mask length {mask.shape} does not match "
            f"{scores.shape[1]} columns"
        )
    if not mask.any():
        warnings.warn(
            "all positions masked in every row", DegenerateRowWarning, stacklevel=2
        )
        return np.zeros_like(scores)
    neg = np.array(-np.inf, dtype=scores.dtype)
    shifted = np.where(mask[None, :], scores, neg)
    rowmax = shifted.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        expd = np.exp(shifted - rowmax)
    expd = np.where(mask[None, :], expd, 0.0)
    denom = expd.sum(axis=1, keepdims=True)
    return expd / denom


def masked_row_softmax_bwd(out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient of masked_row_softmax w.r.t. the scores.

    ``out`` is the forward result; masked columns carry zero probability so
    their score gradient is exactly zero.
    """
    dot = (dout * out).sum(axis=1, keepdims=True)
    return out * (dout - dot)


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Per-row normalization with population (1/d) variance.

    Returns (output, cache) where cache feeds layer_norm_bwd.
    """
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not "
            f"match {x.shape[1]} columns"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std, gamma)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    out, _ = layer_norm_fwd(x, gamma, beta, eps)
    return out


def layer_norm_bwd(cache, dout: np.ndarray):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu_fwd(x: np.ndarray):
    """Exact (erf-based) GELU. Returns (output, cache)."""
    x = np.asarray(x)
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    if phi.dtype != x.dtype:
        phi = phi.astype(x.dtype)
    return x * phi, (x, phi)


def gelu_bwd(cache, dout: np.ndarray) -> np.ndarray:
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dout * (phi + x * pdf)


def softmax_1d(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64).ravel()
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy_loss(logits: np.ndarray, label: int, with_grad: bool = False):
    """Multi-class cross-entropy of a 1xK (or length-K) logit row.

    Underflow-safe: computed as logsumexp(logits) - logits[label]. With
    ``with_grad`` the return value is (loss, grad) where grad is
    softmax(logits) - onehot(label), shaped like the input.
    """
    arr = np.asarray(logits)
    flat = arr.ravel()
    k = flat.shape[0]
    if not 0 <= int(label) < k:
        raise ValueError(f"cross_entropy_loss: label {label} out of range [0, {k})")
    shifted = flat.astype(np.float64) - float(flat.max())
    logsumexp = np.log(np.exp(shifted).sum()) + float(flat.max())
    loss = float(logsumexp - flat[int(label)])
    if not with_grad:
        return loss
    grad = softmax_1d(flat)
    grad[int(label)] -= 1.0
    return loss, grad.reshape(arr.shape).astype(arr.dtype, copy=False)


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise.

    The independent oracle for every analytic gradient in this package.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
