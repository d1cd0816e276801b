"""Input validation helpers used at public API boundaries.

All network activations are 5-axis float64 arrays laid out as
(batch, channel, depth, height, width) with width fastest, matching the
(z, y, x) storage order of volumes.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError

AXIS_NAMES = ("batch", "channel", "depth", "height", "width")


def as_tensor5(x, name: str = "input") -> np.ndarray:
    """Coerce to a contiguous float64 (N, C, D, H, W) array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 5:
        raise ShapeError(f"{name} must have 5 axes (N, C, D, H, W), got {arr.ndim}")
    return arr


def check_finite(arr: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_triple(value, name: str = "value", positive: bool = False) -> tuple[int, int, int]:
    """Coerce to a 3-tuple of ints, optionally requiring strict positivity."""
    try:
        t = tuple(int(v) for v in value)
    except TypeError:
        t = (int(value),) * 3
    if len(t) != 3:
        raise ShapeError(f"{name} must have 3 entries, got {len(t)}")
    if positive and any(v <= 0 for v in t):
        raise ValueError(f"{name} entries must be positive, got {t}")
    if not positive and any(v < 0 for v in t):
        raise ValueError(f"{name} entries must be non-negative, got {t}")
    return t


def check_labels(labels, n: int | None = None) -> np.ndarray:
    """Validate a {0,1} label vector, returning it as an int array."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
    if not np.all(np.isin(arr, (0, 1))):
        bad = arr[~np.isin(arr, (0, 1))][0]
        raise ValueError(f"labels must be 0 or 1, found {bad!r}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {arr.shape[0]}")
    return arr.astype(np.intp)


def check_probability(p: float, name: str = "probability") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p
