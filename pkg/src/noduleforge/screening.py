"""Stage-1 candidate screening.

The screening FCN is applied to whole volumes in one pass, producing a
dense score grid whose geometry (stride and receptive-field-center
offset) is derived from the architecture by the tracer, never hardcoded.
Peaks are extracted by greedy 3D non-maximum suppression and mapped back
to image voxel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError
from .models import ModelParams, screen_forward, trace_receptive_field
from .validation import check_probability
from .volumes import Volume


@dataclass
class ScoreVolume:
    """Nodule-class probabilities on the FCN output grid.

    probs is indexed [iz, iy, ix]; grid index (0, 0, 0) corresponds to
    image voxel `offset` (x, y, z) and a unit grid step moves the image
    position by `stride` voxels.
    """

    probs: np.ndarray
    stride: tuple[int, int, int]
    offset: tuple[int, int, int]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError(f"score grid must be 3-D, got {self.probs.ndim}-D")
        if self.probs.size and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        """(nx, ny, nz) of the score grid."""
        gz, gy, gx = self.probs.shape
        return (gx, gy, gz)


@dataclass
class Candidate:
    """A proposed nodule position with its screening probability."""

    position: tuple[float, float, float]
    probability: float
    scan_id: str = ""
    refined_centroid: tuple[float, float, float] | None = None
    refined_diameter: float | None = None
    refine_probability: float | None = None

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        self.probability = check_probability(self.probability)

    @property
    def final_probability(self) -> float:
        """Refined probability when available, else the screening one."""
        if self.refine_probability is not None:
            return self.refine_probability
        return self.probability


def score_whole_volume(model: ModelParams, vol: Volume) -> ScoreVolume:
    """Fully convolutional scoring of an entire volume.

    Equivalent to evaluating the patch classifier at every grid point;
    softmax over the two output channels gives the nodule probability.
    """
    stride_dhw, offset_dhw, field_dhw = trace_receptive_field(model)
    nz, ny, nx = vol.data.shape
    for have, need, name in zip((nz, ny, nx), field_dhw, ("z", "y", "x")):
        if have < need:
            raise ShapeError(
                f"volume extent {have} along {name} is smaller than the "
                f"receptive field {need}"
            )
    logits = screen_forward(model, vol.data.reshape((1, 1, nz, ny, nx)), mode="infer")
    z = logits[0] - logits[0].max(axis=0, keepdims=True)
    e = np.exp(z)
    probs = e[1] / e.sum(axis=0)
    return ScoreVolume(
        probs=probs,
        stride=tuple(reversed(stride_dhw)),
        offset=tuple(reversed(offset_dhw)),
    )


def index_map(score_idx, sv: ScoreVolume) -> tuple[int, int, int]:
    """Map an (ix, iy, iz) grid index to its image voxel position."""
    idx = tuple(int(v) for v in score_idx)
    gx, gy, gz = sv.grid_shape
    for v, n, name in zip(idx, (gx, gy, gz), ("x", "y", "z")):
        if not 0 <= v < n:
            raise IndexError(f"score index {v} outside grid extent {n} along {name}")
    return tuple(o + s * v for o, s, v in zip(sv.offset, sv.stride, idx))


def nms3d(sv: ScoreVolume, radius: float, threshold: float,
          spacing=(1.0, 1.0, 1.0)) -> list[Candidate]:
    """Greedy 3D non-maximum suppression over the score grid.

    Repeatedly takes the highest remaining score at or above threshold
    (ties broken by lowest flat grid index), emits its index-mapped image
    position, and suppresses every grid point within `radius` of it
    (Euclidean, in spacing-scaled image coordinates). The returned list
    is ordered by descending probability.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    threshold = check_probability(threshold, "threshold")
    gz, gy, gx = sv.probs.shape
    mask = sv.probs >= threshold
    if not mask.any():
        return []
    zz, yy, xx = np.nonzero(mask)
    probs = sv.probs[zz, yy, xx]
    flat = (zz * gy + yy) * gx + xx
    order = np.lexsort((flat, -probs))
    pos = np.stack([
        sv.offset[0] + sv.stride[0] * xx,
        sv.offset[1] + sv.stride[1] * yy,
        sv.offset[2] + sv.stride[2] * zz,
    ], axis=1).astype(np.float64)
    pos_scaled = pos * np.asarray(spacing, dtype=np.float64)
    kept: list[int] = []
    kept_pos = np.empty((0, 3))
    r2 = float(radius) ** 2
    for i in order:
        p = pos_scaled[i]
        if kept and np.min(((kept_pos - p) ** 2).sum(axis=1)) <= r2:
            continue
        kept.append(int(i))
        kept_pos = np.vstack([kept_pos, p])
    return [
        Candidate(position=tuple(pos[i]), probability=float(probs[i]))
        for i in kept
    ]


def screen_scan(model: ModelParams, vol: Volume, threshold: float = 0.85,
                radius: float = 5.0) -> list[Candidate]:
    """score_whole_volume -> nms3d, with scan ids attached."""
    sv = score_whole_volume(model, vol)
    cands = nms3d(sv, radius, threshold, spacing=vol.spacing)
    for c in cands:
        c.scan_id = vol.scan_id
    return cands
