"""Volume and annotation containers.

Volume data is stored (z, y, x) so the x axis is fastest, matching raw
MetaImage layout. All public positions, spacings, and dims are (x, y, z)
tuples; only direct ``data`` indexing uses the reversed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Volume:
    """Dense 3D scalar grid with voxel spacing and world origin."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scan_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D (z, y, x), got {self.data.ndim}-D")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def contains(self, pos) -> bool:
        nx, ny, nz = self.dims
        x, y, z = pos
        return 0 <= x < nx and 0 <= y < ny and 0 <= z < nz

    def voxel_to_world(self, pos):
        return tuple(o + p * s for o, p, s in zip(self.origin, pos, self.spacing))

    def world_to_voxel(self, pos):
        return tuple((p - o) / s for o, p, s in zip(self.origin, pos, self.spacing))

    @property
    def has_world_frame(self) -> bool:
        """True when spacing/origin carry real geometry (e.g. from .mhd)."""
        return self.spacing != (1.0, 1.0, 1.0) or self.origin != (0.0, 0.0, 0.0)


def crop_patch(vol: Volume, center, size, pad_value: float) -> np.ndarray:
    """Axis-aligned (1, 1, D, H, W) crop of exactly `size` (x, y, z) voxels.

    The crop is positioned so its size//2 voxel (per axis) is vol[center];
    out-of-volume voxels are filled with pad_value. The center must lie
    inside the volume.
    """
    center = tuple(int(round(float(c))) for c in center)
    if not vol.contains(center):
        raise IndexError(f"crop center {center} lies outside volume dims {vol.dims}")
    sx, sy, sz = (int(s) for s in size)
    out = np.full((sz, sy, sx), float(pad_value))
    nx, ny, nz = vol.dims
    starts = (center[2] - sz // 2, center[1] - sy // 2, center[0] - sx // 2)
    shape = (sz, sy, sx)
    bounds = (nz, ny, nx)
    src = []
    dst = []
    for st, sh, nb in zip(starts, shape, bounds):
        lo = max(0, st)
        hi = min(nb, st + sh)
        if lo >= hi:
            return out.reshape(1, 1, sz, sy, sx)
        src.append(slice(lo, hi))
        dst.append(slice(lo - st, hi - st))
    out[tuple(dst)] = vol.data[tuple(src)]
    return out.reshape(1, 1, sz, sy, sx)


@dataclass
class NoduleAnnotation:
    """Ground-truth nodule: centroid (x, y, z) and diameter, same units."""

    centroid: tuple[float, float, float]
    diameter: float
    scan_id: str = ""

    def __post_init__(self):
        self.centroid = tuple(float(c) for c in self.centroid)
        self.diameter = float(self.diameter)
        if self.diameter <= 0:
            raise ValueError(f"diameter must be strictly positive, got {self.diameter}")
