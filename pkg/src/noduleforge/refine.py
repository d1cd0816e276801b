"""Stage-2 false positive reduction.

Each screening candidate is re-examined on a larger crop centered at the
proposal. The refiner emits a fresh nodule probability and a regressed
(tx, ty, tz, td) row, decoded back into an absolute centroid and diameter
against the proposal position and crop size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import REFINE_PATCH, ModelParams, refine_forward
from .nn.losses import softmax2
from .nn.targets import decode_regression_target
from .screening import Candidate, screen_scan
from .volumes import Volume, crop_patch

_FORWARD_CHUNK = 16


@dataclass
class RefinerConfig:
    patch_size: tuple[int, int, int] = REFINE_PATCH
    decision_threshold: float = 0.5
    pad_value: float | None = None  # None: use the volume minimum

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        if any(v <= 0 for v in self.patch_size):
            raise ValueError(f"patch_size must be positive, got {self.patch_size}")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ValueError(
                f"decision_threshold must lie in [0, 1], got {self.decision_threshold}"
            )


def refine_candidates(model: ModelParams, vol: Volume, cands,
                      cfg: RefinerConfig | None = None) -> list[Candidate]:
    """Classify and localize candidates; drop those below the threshold.

    Survivors carry refine_probability plus the decoded centroid and
    diameter, and are sorted by refine_probability descending (ties by
    position). Candidate count only ever shrinks, by thresholding.
    """
    cfg = cfg or RefinerConfig()
    cands = list(cands)
    if not cands:
        return []
    pad = float(vol.data.min()) if cfg.pad_value is None else float(cfg.pad_value)
    patches = np.concatenate(
        [crop_patch(vol, c.position, cfg.patch_size, pad) for c in cands], axis=0
    )
    probs = np.empty(len(cands))
    regs = np.empty((len(cands), 4))
    for s in range(0, len(cands), _FORWARD_CHUNK):
        e = min(len(cands), s + _FORWARD_CHUNK)
        cls_logits, reg = refine_forward(model, patches[s:e], mode="infer")
        probs[s:e] = softmax2(cls_logits)[:, 1]
        regs[s:e] = reg
    out = []
    for c, p, t in zip(cands, probs, regs):
        if p < cfg.decision_threshold:
            continue
        centroid, diameter = decode_regression_target(t, c.position, cfg.patch_size)
        out.append(Candidate(
            position=c.position,
            probability=c.probability,
            scan_id=c.scan_id,
            refined_centroid=centroid,
            refined_diameter=diameter,
            refine_probability=float(p),
        ))
    out.sort(key=lambda c: (-c.refine_probability, c.position))
    return out


def detect(fcn_model: ModelParams, refine_model: ModelParams, vol: Volume,
           screen_threshold: float = 0.85, nms_radius: float = 5.0,
           cfg: RefinerConfig | None = None) -> list[Candidate]:
    """Full two-stage pipeline on one volume: screen, then refine."""
    cands = screen_scan(fcn_model, vol, threshold=screen_threshold, radius=nms_radius)
    return refine_candidates(refine_model, vol, cands, cfg)
