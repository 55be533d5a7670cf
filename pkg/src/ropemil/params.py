"""Walking nested parameter dataclasses as flat (path, array) sequences.

Parameter containers here are plain dataclasses holding numpy arrays,
nested dataclasses or lists thereof. Gradient trees reuse the same
dataclass types with gradient arrays in the value slots, so optimizers and
gradient checks can zip a parameter tree with its gradient tree; iteration
order is field order, which makes the flattening deterministic.
"""

from __future__ import annotations

import copy
import dataclasses

import numpy as np


def tree_arrays(obj, prefix: str = ""):
    """Yield (path, array) for every ndarray leaf, in field order."""
    if isinstance(obj, np.ndarray):
        yield prefix or "value", obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            path = f"{prefix}.{f.name}" if prefix else f.name
            yield from tree_arrays(getattr(obj, f.name), path)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from tree_arrays(item, f"{prefix}[{i}]")
    # scalars / strings / None are configuration, not parameters


def tree_copy(obj):
    """Deep copy of a parameter tree (arrays copied)."""
    return copy.deepcopy(obj)


def tree_zeros_like(obj):
    out = copy.deepcopy(obj)
    for _, arr in tree_arrays(out):
        arr.fill(0)
    return out


def tree_add_(acc, other, scale: float = 1.0):
    """In-place acc += scale * other, leafwise."""
    for (pa, a), (pb, b) in zip(tree_arrays(acc), tree_arrays(other), strict=True):
        if pa != pb:
            raise ValueError(f"parameter trees differ: {pa} vs {pb}")
        a += scale * b
    return acc


def tree_scale_(obj, scale: float):
    for _, arr in tree_arrays(obj):
        arr *= scale
    return obj


def param_count(obj) -> int:
    return sum(arr.size for _, arr in tree_arrays(obj))


def has_non_finite(obj) -> bool:
    return any(not np.isfinite(arr).all() for _, arr in tree_arrays(obj))
