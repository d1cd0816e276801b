"""Scale-invariant regression target encoding for nodule localization.

A proposal at position p inside a crop of size s, with ground truth
centroid g and diameter d, maps to

    t_axis = 2 * (g_axis - p_axis) / s_axis          for x, y, z
    t_d    = ln(d / sqrt(s_x^2 + s_y^2 + s_z^2))

so translations are normalized by the half patch size and the size shift
lives in log space relative to the patch diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RegressionTarget:
    tx: float
    ty: float
    tz: float
    td: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tz, self.td)


def patch_diagonal(size) -> float:
    sx, sy, sz = (float(v) for v in size)
    return math.sqrt(sx * sx + sy * sy + sz * sz)


def encode_regression_target(centroid, diameter, proposal, patch_size) -> RegressionTarget:
    """Encode ground truth (centroid, diameter) against proposal/patch size."""
    sx, sy, sz = (float(v) for v in patch_size)
    if min(sx, sy, sz) <= 0:
        raise ValueError(f"patch size must be strictly positive, got {patch_size}")
    diameter = float(diameter)
    if diameter <= 0:
        raise ValueError(f"diameter must be strictly positive, got {diameter}")
    gx, gy, gz = (float(v) for v in centroid)
    px, py, pz = (float(v) for v in proposal)
    return RegressionTarget(
        tx=2.0 * (gx - px) / sx,
        ty=2.0 * (gy - py) / sy,
        tz=2.0 * (gz - pz) / sz,
        td=math.log(diameter / patch_diagonal(patch_size)),
    )


def decode_regression_target(target, proposal, patch_size):
    """Invert the encoding: returns ((x, y, z), diameter)."""
    sx, sy, sz = (float(v) for v in patch_size)
    if min(sx, sy, sz) <= 0:
        raise ValueError(f"patch size must be strictly positive, got {patch_size}")
    if isinstance(target, RegressionTarget):
        tx, ty, tz, td = target.as_tuple()
    else:
        tx, ty, tz, td = (float(v) for v in target)
    px, py, pz = (float(v) for v in proposal)
    centroid = (
        px + 0.5 * tx * sx,
        py + 0.5 * ty * sy,
        pz + 0.5 * tz * sz,
    )
    return centroid, math.exp(td) * patch_diagonal(patch_size)
