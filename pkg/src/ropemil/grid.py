"""Sparse integer patch grid and bag construction.

Pixel coordinates of tissue patches are floored by the patch size P into
integer grid cells: (x_grid, y_grid) = (x_px // P, y_px // P). A PatchBag
packages the per-patch feature matrix with those cells plus a validity
mask; masked rows exist only as padding and are never read downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, ValidationError
from .numkernel import require_matrix


@dataclass(frozen=True)
class GridConfig:
    patch_size_px: int = 256

    def __post_init__(self):
        if int(self.patch_size_px) < 1:
            raise ConfigurationError(
                f"patch_size_px must be >= 1, got {self.patch_size_px}"
            )


@dataclass(frozen=True)
class PatchBag:
    """N patch feature vectors with grid coordinates and a validity mask."""

    features: np.ndarray  # N x F
    grid_coords: np.ndarray  # N x 2 ints, (x_grid, y_grid)
    mask: np.ndarray  # N bools, True = real tissue patch
    bag_id: str
    label: int | None = None

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def quantize_coords(pixel_coords, cfg: GridConfig) -> np.ndarray:
    """Floor pixel coordinates into grid cells. Returns an N x 2 int array."""
    coords = np.asarray(pixel_coords)
    if coords.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    coords = np.atleast_2d(coords)
    if coords.shape[1] != 2:
        raise DimensionError(f"pixel coords must be pairs, got shape {coords.shape}")
    if np.any(coords < 0):
        bad = coords[(coords < 0).any(axis=1)][0]
        raise ValueError(f"negative pixel coordinate {tuple(bad)}")
    return (coords.astype(np.int64) // int(cfg.patch_size_px)).astype(np.int64)


def build_bag(features, grid_coords, bag_id: str, label: int | None = None) -> PatchBag:
    """Assemble a bag with an all-true mask, rejecting duplicate grid cells."""
    features = require_matrix(features, "features")
    coords = np.asarray(grid_coords, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValidationError(f"empty bag: {bag_id!r} has no instances")
    coords = np.atleast_2d(coords)
    if coords.shape != (features.shape[0], 2):
        raise DimensionError(
            f"bag {bag_id!r}: {features.shape[0]} feature rows vs "
            f"coords shape {coords.shape}"
        )
    if np.any(coords < 0):
        raise ValidationError(f"bag {bag_id!r}: negative grid coordinate")
    seen = set()
    for x, y in map(tuple, coords.tolist()):
        if (x, y) in seen:
            raise ValidationError(f"bag {bag_id!r}: duplicate grid cell ({x}, {y})")
        seen.add((x, y))
    mask = np.ones(features.shape[0], dtype=bool)
    return PatchBag(features=features, grid_coords=coords, mask=mask,
                    bag_id=bag_id, label=label)


def pad_bags(bags: list[PatchBag]):
    """Pad bags to a common length for vectorized evaluation.

    Padding rows carry zero features, coordinate (0, 0) and mask=False.
    Returns (features [B, N_max, F], coords [B, N_max, 2], mask [B, N_max]).
    """
    if not bags:
        raise ValidationError("pad_bags: need at least one bag")
    dims = {b.feature_dim for b in bags}
    if len(dims) > 1:
        raise DimensionError(f"pad_bags: mixed feature dims {sorted(dims)}")
    f_dim = dims.pop()
    n_max = max(b.n_instances for b in bags)
    dtype = bags[0].features.dtype
    features = np.zeros((len(bags), n_max, f_dim), dtype=dtype)
    coords = np.zeros((len(bags), n_max, 2), dtype=np.int64)
    mask = np.zeros((len(bags), n_max), dtype=bool)
    for i, b in enumerate(bags):
        n = b.n_instances
        features[i, :n] = b.features
        coords[i, :n] = b.grid_coords
        mask[i, :n] = b.mask
    return features, coords, mask
