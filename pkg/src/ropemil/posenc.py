"""Positional encodings for sparse 2D token grids.

Rotary encoding rotates consecutive feature pairs (h_2j, h_2j+1) by the
angle m * theta_j, theta_j = base**(-2j/d), so the key-query inner product
of rotated vectors depends only on coordinate differences. The 2D form
splits the feature vector in half: the first half rotates with x_grid, the
second with y_grid, each half using frequencies for its own width.

An absolute interleaved sin/cos encoding (the ViT-style ablation arm) is
provided alongside; it is added to token features rather than rotated into
queries and keys, and is deliberately not translation invariant.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


class RopeTable:
    """Precomputed cos/sin rotation factors per coordinate value.

    The cache covers coordinate magnitudes seen so far and grows on demand;
    negative coordinates reuse cached rows through cos(-a) = cos(a),
    sin(-a) = -sin(a), which keeps backward passes (rotation by -m) exact.
    """

    def __init__(self, dim: int, base: float = 10000.0):
        if dim <= 0 or dim % 2 != 0:
            raise ConfigurationError(f"RopeTable dim must be even and positive, got {dim}")
        self.dim = int(dim)
        self.base = float(base)
        j = np.arange(dim // 2, dtype=np.float64)
        self.inv_freq = self.base ** (-2.0 * j / dim)  # theta_0 = 1
        self._cos = np.ones((1, dim // 2))
        self._sin = np.zeros((1, dim // 2))
        self._half: RopeTable | None = None

    def half(self) -> "RopeTable":
        """Table of width dim/2, used per axis by the 2D split."""
        if self.dim % 4 != 0:
            raise ConfigurationError(
                f"2D rotary encoding needs dim divisible by 4, got {self.dim}"
            )
        if self._half is None:
            self._half = RopeTable(self.dim // 2, self.base)
        return self._half

    def _ensure(self, max_abs: int):
        if max_abs < self._cos.shape[0]:
            return
        size = max(max_abs + 1, 2 * self._cos.shape[0])
        angles = np.multiply.outer(np.arange(size, dtype=np.float64), self.inv_freq)
        self._cos = np.cos(angles)
        self._sin = np.sin(angles)

    def factors(self, coords: np.ndarray, dtype=np.float64):
        """cos/sin factors for integer coordinates of any sign.

        Returns two arrays of shape coords.shape + (dim/2,).
        """
        coords = np.asarray(coords, dtype=np.int64)
        mag = np.abs(coords)
        self._ensure(int(mag.max(initial=0)))
        cos = self._cos[mag]
        sin = self._sin[mag] * np.sign(coords)[..., None]
        if dtype != np.float64:
            cos = cos.astype(dtype)
            sin = sin.astype(dtype)
        return cos, sin


def _rotate(h: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive feature pairs by the given per-pair factors."""
    even = h[..., 0::2]
    odd = h[..., 1::2]
    out = np.empty_like(h)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = odd * cos + even * sin
    return out


def rope_1d(h: np.ndarray, m: int, table: RopeTable) -> np.ndarray:
    """Rotate a single feature vector by its 1D integer coordinate."""
    h = np.asarray(h)
    if h.shape[-1] != table.dim:
        raise ConfigurationError(
            f"rope_1d: vector length {h.shape[-1]} does not match table dim {table.dim}"
        )
    cos, sin = table.factors(np.asarray(m), dtype=h.dtype)
    return _rotate(h, cos, sin)


def rope_2d(H: np.ndarray, coords: np.ndarray, table: RopeTable) -> np.ndarray:
    """Rotate rows of H by their (x_grid, y_grid) cells.

    The first dim/2 features rotate with x, the last dim/2 with y; the two
    halves are concatenated. Coordinates may be negative (used by the
    backward pass, which is a rotation by the negated coordinates).
    """
    H = np.asarray(H)
    if H.shape[-1] != table.dim:
        raise ConfigurationError(
            f"rope_2d: feature width {H.shape[-1]} does not match table dim {table.dim}"
        )
    half = table.half()
    coords = np.asarray(coords, dtype=np.int64)
    cos_x, sin_x = half.factors(coords[..., 0], dtype=H.dtype)
    cos_y, sin_y = half.factors(coords[..., 1], dtype=H.dtype)
    d2 = table.dim // 2
    out = np.empty_like(H)
    out[..., :d2] = _rotate(H[..., :d2], cos_x, sin_x)
    out[..., d2:] = _rotate(H[..., d2:], cos_y, sin_y)
    return out


def rope_2d_bwd(dY: np.ndarray, coords: np.ndarray, table: RopeTable) -> np.ndarray:
    """Gradient through rope_2d: rotations are orthogonal, so the adjoint
    is a rotation by the negated coordinates."""
    return rope_2d(dY, -np.asarray(coords, dtype=np.int64), table)


def sincos_abs_2d(coords: np.ndarray, d: int, base: float = 10000.0) -> np.ndarray:
    """ViT-style absolute 2D sin-cos encoding.

    Per token, the first d/2 entries encode x_grid as interleaved
    [sin(x*theta_0), cos(x*theta_0), sin(x*theta_1), ...] and the last d/2
    encode y_grid the same way, with theta_j = base**(-2j/(d/2)).
    """
    if d <= 0 or d % 4 != 0:
        raise ConfigurationError(f"sincos_abs_2d: d must be divisible by 4, got {d}")
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    half = RopeTable(d // 2, base)
    out = np.empty((coords.shape[0], d), dtype=np.float64)
    for axis, offset in ((0, 0), (1, d // 2)):
        cos, sin = half.factors(coords[:, axis])
        out[:, offset + 0 : offset + d // 2 : 2] = sin
        out[:, offset + 1 : offset + d // 2 : 2] = cos
    return out
