"""Exact masked multi-head self-attention, two ways.

``attend_naive`` materializes the full N x N score matrix and is the
reference (and the training path: its backward is analytic and cheap at
desk scale). ``attend_streaming`` computes the identical result with an
online softmax over key chunks, keeping per-head scratch bounded by the
chunk sizes instead of N^2. Both kernels treat masked positions as -inf
scores, replaced before the running-max update so the online softmax stays
exact, and both emit exact zero rows for masked queries.

Results of the two kernels agree up to floating-point reassociation:
within 1e-10 relative at 64-bit, 1e-5 at 32-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, EmptyAttentionContext
from .numkernel import masked_row_softmax, masked_row_softmax_bwd, matmul
from .posenc import RopeTable, rope_2d, rope_2d_bwd


@dataclass
class MhsaParams:
    """Projection weights of one multi-head self-attention block."""

    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.W_q.shape[0]
        for name in ("W_q", "W_k", "W_v", "W_o"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise DimensionError(f"MhsaParams.{name}: expected ({d}, {d}), got {w.shape}")
        if d % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {d} not divisible by n_heads {self.n_heads}"
            )

    @property
    def d_model(self) -> int:
        return self.W_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def init_mhsa_params(d_model: int, n_heads: int, rng: np.random.Generator,
                     dtype=np.float32) -> MhsaParams:
    def w():
        bound = 1.0 / np.sqrt(d_model)
        return rng.uniform(-bound, bound, size=(d_model, d_model)).astype(dtype)

    return MhsaParams(W_q=w(), W_k=w(), W_v=w(), W_o=w(), n_heads=n_heads)


class AttentionWorkspace:
    """Bounded scratch buffers for the streaming kernel.

    Buffers are sized by (query_chunk, key_chunk, head_dim) and allocated
    on first use; ``peak_scratch_bytes`` reports the largest total ever
    held, which is the kernel's entire scratch footprint. Nothing here
    scales with the sequence length.
    """

    def __init__(self, query_chunk: int = 128, key_chunk: int = 128):
        if query_chunk < 1 or key_chunk < 1:
            raise ConfigurationError("chunk sizes must be >= 1")
        self.query_chunk = int(query_chunk)
        self.key_chunk = int(key_chunk)
        self._buffers: dict[str, np.ndarray] = {}
        self._shape_key = None
        self.peak_scratch_bytes = 0

    def prepare(self, head_dim: int, dtype) -> dict[str, np.ndarray]:
        key = (head_dim, np.dtype(dtype))
        if self._shape_key != key:
            bq, bk = self.query_chunk, self.key_chunk
            self._buffers = {
                "scores": np.empty((bq, bk), dtype=dtype),
                "q": np.empty((bq, head_dim), dtype=dtype),
                "k": np.empty((bk, head_dim), dtype=dtype),
                "v": np.empty((bk, head_dim), dtype=dtype),
                "av": np.empty((bq, head_dim), dtype=dtype),
                "acc": np.empty((bq, head_dim), dtype=dtype),
                "m_run": np.empty(bq, dtype=dtype),
                "m_new": np.empty(bq, dtype=dtype),
                "m_safe": np.empty(bq, dtype=dtype),
                "alpha": np.empty(bq, dtype=dtype),
                "l_run": np.empty(bq, dtype=dtype),
                "row_sum": np.empty(bq, dtype=dtype),
                "neg_inf_rows": np.empty(bq, dtype=bool),
            }
            self._shape_key = key
        total = sum(b.nbytes for b in self._buffers.values())
        self.peak_scratch_bytes = max(self.peak_scratch_bytes, total)
        return self._buffers

    @property
    def scratch_bytes(self) -> int:
        return sum(b.nbytes for b in self._buffers.values())


def _check_qkv(Q, K, V, mask):
    Q = np.asarray(Q)
    K = np.asarray(K)
    V = np.asarray(V)
    mask = np.asarray(mask, dtype=bool)
    if Q.shape != K.shape or Q.shape != V.shape:
        raise DimensionError(f"Q/K/V shapes differ: {Q.shape}, {K.shape}, {V.shape}")
    if mask.shape != (Q.shape[0],):
        raise DimensionError(f"mask length {mask.shape} vs {Q.shape[0]} rows")
    if not mask.any():
        raise EmptyAttentionContext("empty attention context: every key is masked")
    return Q, K, V, mask


def _sanitize(rows: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy with masked rows forced to zero (padding may hold garbage/NaN)."""
    out = rows.copy()
    out[~mask] = 0
    return out


def attend_naive_fwd(Q, K, V, mask, scale: float):
    """Quadratic reference attention. Returns (out, cache)."""
    Q, K, V, mask = _check_qkv(Q, K, V, mask)
    Qs = _sanitize(Q, mask)
    Ks = _sanitize(K, mask)
    Vs = _sanitize(V, mask)
    scores = (Qs @ Ks.T) * np.asarray(scale, dtype=Q.dtype)
    probs = masked_row_softmax(scores, mask)
    out = probs @ Vs
    out[~mask] = 0
    return out, (probs, Qs, Ks, Vs, mask, scale)


def attend_naive(Q, K, V, mask, scale: float) -> np.ndarray:
    out, _ = attend_naive_fwd(Q, K, V, mask, scale)
    return out


def attend_naive_bwd(cache, dout: np.ndarray):
    """Returns (dQ, dK, dV)."""
    probs, Qs, Ks, Vs, mask, scale = cache
    dout = dout.copy()
    dout[~mask] = 0
    dV = probs.T @ dout
    dprobs = dout @ Vs.T
    dscores = masked_row_softmax_bwd(probs, dprobs)
    dQ = (dscores @ Ks) * np.asarray(scale, dtype=Qs.dtype)
    dK = (dscores.T @ Qs) * np.asarray(scale, dtype=Qs.dtype)
    return dQ, dK, dV


def attend_streaming(Q, K, V, mask, scale: float,
                     ws: AttentionWorkspace | None = None) -> np.ndarray:
    """Online-softmax attention over key chunks with bounded scratch.

    Maintains a running row max and denominator per query chunk, rescaling
    the output accumulator whenever the max improves; masked keys enter as
    -inf scores before the max update, so the result is exactly the masked
    softmax-weighted sum, up to summation order.
    """
    Q, K, V, mask = _check_qkv(Q, K, V, mask)
    if ws is None:
        ws = AttentionWorkspace()
    n, head_dim = Q.shape
    dtype = Q.dtype
    bq, bk = ws.query_chunk, ws.key_chunk
    buf = ws.prepare(head_dim, dtype)
    scale = np.asarray(scale, dtype=dtype)
    out = np.empty_like(Q)
    neg_inf = np.array(-np.inf, dtype=dtype)

    for q0 in range(0, n, bq):
        q1 = min(q0 + bq, n)
        nq = q1 - q0
        qc = buf["q"][:nq]
        np.copyto(qc, Q[q0:q1])
        qc[~mask[q0:q1]] = 0
        m_run = buf["m_run"][:nq]
        l_run = buf["l_run"][:nq]
        acc = buf["acc"][:nq]
        m_run.fill(-np.inf)
        l_run.fill(0)
        acc.fill(0)

        for k0 in range(0, n, bk):
            k1 = min(k0 + bk, n)
            nk = k1 - k0
            mask_c = mask[k0:k1]
            kc = buf["k"][:nk]
            vc = buf["v"][:nk]
            np.copyto(kc, K[k0:k1])
            np.copyto(vc, V[k0:k1])
            kc[~mask_c] = 0
            vc[~mask_c] = 0

            s = buf["scores"][:nq, :nk]
            np.matmul(qc, kc.T, out=s)
            s *= scale
            s[:, ~mask_c] = neg_inf

            m_new = buf["m_new"][:nq]
            np.amax(s, axis=1, out=m_new)
            np.maximum(m_new, m_run, out=m_new)
            # -inf only while every key so far is masked; shift by 0 there
            # so exp() sees -inf scores, not NaN from (-inf) - (-inf)
            m_safe = buf["m_safe"][:nq]
            np.copyto(m_safe, m_new)
            rows = buf["neg_inf_rows"][:nq]
            np.isneginf(m_safe, out=rows)
            m_safe[rows] = 0

            alpha = buf["alpha"][:nq]
            np.subtract(m_run, m_safe, out=alpha)
            np.exp(alpha, out=alpha)

            np.subtract(s, m_safe[:, None], out=s)
            np.exp(s, out=s)  # s now holds the probabilities' numerators

            row_sum = buf["row_sum"][:nq]
            np.sum(s, axis=1, out=row_sum)
            np.multiply(l_run, alpha, out=l_run)
            l_run += row_sum

            acc *= alpha[:, None]
            av = buf["av"][:nq]
            np.matmul(s, vc, out=av)
            acc += av
            np.copyto(m_run, m_new)

        np.divide(acc, l_run[:, None], out=out[q0:q1])
    out[~mask] = 0
    return out


def mhsa_fwd(X, params: MhsaParams, coords, mask, posenc_mode: str = "none",
             kernel: str = "naive", ws: AttentionWorkspace | None = None,
             rope_table: RopeTable | None = None):
    """Full multi-head block: project, split heads, rotate Q/K if asked,
    attend per head, merge, output-project. Masked rows output zero.

    Returns (out, cache); the cache supports backward for the naive kernel
    only (the streaming kernel is a forward/inference path).
    """
    X = np.asarray(X)
    mask = np.asarray(mask, dtype=bool)
    if posenc_mode not in ("none", "rope"):
        raise ConfigurationError(f"unknown posenc_mode {posenc_mode!r}")
    if kernel not in ("naive", "streaming"):
        raise ConfigurationError(f"unknown kernel {kernel!r}")
    d_model, n_heads, head_dim = params.d_model, params.n_heads, params.head_dim
    if X.shape[1] != d_model:
        raise DimensionError(f"X has width {X.shape[1]}, params expect {d_model}")
    use_rope = posenc_mode == "rope"
    if use_rope:
        if head_dim % 4 != 0:
            raise ConfigurationError(
                f"rope needs head_dim divisible by 4, got {head_dim}"
            )
        coords = np.asarray(coords)
        if coords.shape != (X.shape[0], 2):
            raise DimensionError(
                f"coords shape {coords.shape} vs {X.shape[0]} rows of X")
        if rope_table is None:
            rope_table = RopeTable(head_dim)
        elif rope_table.dim != head_dim:
            raise ConfigurationError(
                f"rope table dim {rope_table.dim} != head_dim {head_dim}"
            )

    Xs = _sanitize(X, mask)
    Q = matmul(Xs, params.W_q)
    K = matmul(Xs, params.W_k)
    V = matmul(Xs, params.W_v)
    scale = 1.0 / np.sqrt(head_dim)

    merged = np.empty_like(X)
    head_caches = []
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        Qh, Kh, Vh = Q[:, sl], K[:, sl], V[:, sl]
        if use_rope:
            Qh = rope_2d(Qh, coords, rope_table)
            Kh = rope_2d(Kh, coords, rope_table)
        if kernel == "streaming":
            merged[:, sl] = attend_streaming(Qh, Kh, Vh, mask, scale, ws)
            head_caches.append(None)
        else:
            merged[:, sl], cache_h = attend_naive_fwd(Qh, Kh, Vh, mask, scale)
            head_caches.append(cache_h)
    out = matmul(merged, params.W_o)
    out[~mask] = 0
    cache = None
    if kernel == "naive":
        cache = (Xs, merged, head_caches, params, coords, mask, use_rope, rope_table)
    return out, cache


def mhsa_forward(X, params: MhsaParams, coords, mask, posenc_mode: str = "none",
                 kernel: str = "naive", ws: AttentionWorkspace | None = None,
                 rope_table: RopeTable | None = None) -> np.ndarray:
    out, _ = mhsa_fwd(X, params, coords, mask, posenc_mode, kernel, ws, rope_table)
    return out


def mhsa_bwd(cache, dout: np.ndarray):
    """Backward of the naive-kernel block. Returns (dX, grads: MhsaParams)."""
    Xs, merged, head_caches, params, coords, mask, use_rope, rope_table = cache
    if head_caches[0] is None:
        raise ConfigurationError("streaming kernel has no backward; use kernel='naive'")
    n_heads, head_dim = params.n_heads, params.head_dim
    dout = dout.copy()
    dout[~mask] = 0

    dW_o = matmul(merged.T, dout)
    dmerged = matmul(dout, params.W_o.T)
    dQ = np.empty_like(merged)
    dK = np.empty_like(merged)
    dV = np.empty_like(merged)
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        dQh, dKh, dVh = attend_naive_bwd(head_caches[h], dmerged[:, sl])
        if use_rope:
            dQh = rope_2d_bwd(dQh, coords, rope_table)
            dKh = rope_2d_bwd(dKh, coords, rope_table)
        dQ[:, sl] = dQh
        dK[:, sl] = dKh
        dV[:, sl] = dVh

    dW_q = matmul(Xs.T, dQ)
    dW_k = matmul(Xs.T, dK)
    dW_v = matmul(Xs.T, dV)
    dX = matmul(dQ, params.W_q.T)
    dX += matmul(dK, params.W_k.T)
    dX += matmul(dV, params.W_v.T)
    dX[~mask] = 0
    grads = replace(params, W_q=dW_q, W_k=dW_k, W_v=dW_v, W_o=dW_o)
    return dX, grads
