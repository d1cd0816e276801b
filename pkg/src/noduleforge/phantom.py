"""Deterministic phantom volumes and the training-patch pipeline.

A phantom is Gaussian background noise plus three object families drawn
from one contrast distribution:

* nodules: spherical Gaussian blobs whose full width at half maximum is
  the annotated diameter,
* vessel mimics: line segments with a Gaussian radial profile,
* wall mimics: blobs centered on a volume face, so only a hemisphere
  protrudes into the volume.

Only nodules are annotated; mimic centers are kept in ``Volume.meta`` so
samplers can mine them as hard negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .exceptions import PlacementError
from .training import TrainBatch
from .volumes import NoduleAnnotation, Volume, crop_patch

# FWHM of a Gaussian = 2*sqrt(2*ln 2) * sigma
FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))

_PLACEMENT_RETRIES = 200


@dataclass
class PhantomSpec:
    """Geometry and difficulty knobs of one generated volume."""

    dims: tuple[int, int, int] = (80, 80, 32)
    n_nodules: int = 2
    diameter_range: tuple[float, float] = (4.0, 10.0)
    n_mimics: int = 6
    noise_sigma: float = 0.08
    seed: int = 0
    contrast_range: tuple[float, float] = (0.7, 1.0)
    # nodule centroids stay this far from the volume faces (x, y, z) so a
    # valid-convolution screening grid can always reach them
    edge_margin: tuple[float, float, float] = (15.0, 15.0, 5.0)

    def __post_init__(self):
        lo, hi = self.diameter_range
        if not (3.0 <= lo <= hi <= 30.0):
            raise ValueError(
                f"diameter_range must lie within [3, 30], got {self.diameter_range}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if min(self.dims) < 8:
            raise ValueError(f"dims too small to place anything: {self.dims}")


def _add_blob(data: np.ndarray, center, fwhm: float, amp: float) -> None:
    """Add amp * exp(-r^2 / (2 sigma^2)) around center (x, y, z) in place."""
    nz, ny, nx = data.shape
    cx, cy, cz = center
    sigma = fwhm / FWHM_FACTOR
    r = 3.0 * sigma
    zs = slice(max(0, math.floor(cz - r)), min(nz, math.ceil(cz + r) + 1))
    ys = slice(max(0, math.floor(cy - r)), min(ny, math.ceil(cy + r) + 1))
    xs = slice(max(0, math.floor(cx - r)), min(nx, math.ceil(cx + r) + 1))
    z, y, x = np.ogrid[zs, ys, xs]
    d2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
    data[zs, ys, xs] += amp * np.exp(-d2 / (2.0 * sigma * sigma))


def _add_tube(data: np.ndarray, anchor, direction, half_len: float,
              fwhm: float, amp: float) -> None:
    """Add a segment with Gaussian radial profile and rounded caps."""
    nz, ny, nx = data.shape
    ax, ay, az = anchor
    ux, uy, uz = direction
    sigma = fwhm / FWHM_FACTOR
    r = half_len + 3.0 * sigma
    zs = slice(max(0, math.floor(az - r)), min(nz, math.ceil(az + r) + 1))
    ys = slice(max(0, math.floor(ay - r)), min(ny, math.ceil(ay + r) + 1))
    xs = slice(max(0, math.floor(ax - r)), min(nx, math.ceil(ax + r) + 1))
    z, y, x = np.ogrid[zs, ys, xs]
    px, py, pz = x - ax, y - ay, z - az
    t = np.clip(px * ux + py * uy + pz * uz, -half_len, half_len)
    d2 = (px - t * ux) ** 2 + (py - t * uy) ** 2 + (pz - t * uz) ** 2
    data[zs, ys, xs] += amp * np.exp(-d2 / (2.0 * sigma * sigma))


def _far_enough(center, radius, placed, gap: float) -> bool:
    return all(
        math.dist(center, c) >= radius + r + gap for c, r in placed
    )


def generate_phantom(spec: PhantomSpec, scan_id: str | None = None):
    """Build one phantom volume; returns (Volume, annotations).

    Reproducible bit for bit from spec.seed. Raises PlacementError when
    the requested object count cannot be placed without overlap.
    """
    if scan_id is None:
        scan_id = f"phantom-{spec.seed:05d}"
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    if spec.noise_sigma > 0:
        data = rng.normal(0.0, spec.noise_sigma, size=(nz, ny, nx))
    else:
        data = np.zeros((nz, ny, nx))

    placed: list[tuple[tuple[float, float, float], float]] = []  # (center, radius)
    annotations: list[NoduleAnnotation] = []
    clo, chi = spec.contrast_range

    def place(radius: float, margins, gap: float):
        for m, dim in zip(margins, (nx, ny, nz)):
            if m > dim - 1 - m:
                raise PlacementError(
                    f"margin {m:.1f} leaves no room in a {dim}-voxel axis"
                )
        for _ in range(_PLACEMENT_RETRIES):
            c = tuple(
                rng.uniform(m, dim - 1 - m)
                for m, dim in zip(margins, (nx, ny, nz))
            )
            if _far_enough(c, radius, placed, gap):
                return c
        raise PlacementError(
            f"could not place an object of radius {radius:.1f} after "
            f"{_PLACEMENT_RETRIES} tries; reduce counts or enlarge dims"
        )

    for _ in range(spec.n_nodules):
        d = rng.uniform(*spec.diameter_range)
        amp = rng.uniform(clo, chi)
        margins = tuple(max(d / 2.0 + 2.0, em) for em in spec.edge_margin)
        center = place(d / 2.0, margins, gap=8.0)
        _add_blob(data, center, d, amp)
        placed.append((center, d / 2.0))
        annotations.append(NoduleAnnotation(centroid=center, diameter=d,
                                            scan_id=scan_id))

    mimic_centers: list[tuple[float, float, float]] = []
    for m in range(spec.n_mimics):
        amp = rng.uniform(clo, chi)
        if m % 2 == 0:
            # vessel-like tube
            fwhm = rng.uniform(3.0, 7.0)
            half_len = rng.uniform(6.0, 12.0)
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            anchor = place(half_len / 2.0, (6.0, 6.0, 6.0), gap=8.0)
            _add_tube(data, anchor, tuple(v), half_len, fwhm, amp)
            placed.append((anchor, half_len / 2.0))
            mimic_centers.append(anchor)
        else:
            # wall-attached hemisphere: blob centered on a volume face
            fwhm = rng.uniform(4.0, 9.0)
            face = int(rng.integers(6))
            axis, side = divmod(face, 2)
            c = [rng.uniform(8.0, dim - 9.0) for dim in (nx, ny, nz)]
            c[axis] = 0.0 if side == 0 else float((nx, ny, nz)[axis] - 1)
            center = tuple(c)
            if not _far_enough(center, fwhm / 2.0, placed, 8.0):
                continue  # crowded face; phantom simply gets one less mimic
            _add_blob(data, center, fwhm, amp)
            placed.append((center, fwhm / 2.0))
            mimic_centers.append(center)

    vol = Volume(data=data, scan_id=scan_id,
                 meta={"mimic_centers": mimic_centers})
    return vol, annotations


# ---------------------------------------------------------------------------
# geometric augmentation

_FLIP_AXES = {"x": 4, "y": 3, "z": 2}


def augment_point(op, point, size):
    """Transform an (x, y, z) patch-local point the same way augment
    transforms patch content. `size` is the patch (x, y, z) extent."""
    kind = op[0]
    x, y, z = (float(v) for v in point)
    sx, sy, sz = (int(v) for v in size)
    if kind == "flip":
        axis = op[1]
        if axis == "x":
            return (sx - 1 - x, y, z)
        if axis == "y":
            return (x, sy - 1 - y, z)
        if axis == "z":
            return (x, y, sz - 1 - z)
        raise ValueError(f"flip axis must be x, y or z, got {axis!r}")
    if kind == "rot90":
        k = int(op[1])
        if k not in (1, 2, 3):
            raise ValueError(f"rotation count must be 1, 2 or 3, got {k}")
        for _ in range(k):
            # matches the data transform: new(y', x') = old(y = W-1-x', x = y')
            x, y = sy - 1 - y, x
        return (x, y, z)
    if kind == "scale":
        s = float(op[1])
        cx, cy, cz = (sx - 1) / 2.0, (sy - 1) / 2.0, (sz - 1) / 2.0
        return (cx + (x - cx) * s, cy + (y - cy) * s, cz + (z - cz) * s)
    if kind == "translate":
        tx, ty, tz = op[1]
        return (x + tx, y + ty, z + tz)
    raise ValueError(f"unknown augmentation {kind!r}")


def augment(patch: np.ndarray, anno: NoduleAnnotation | None, op, rng=None):
    """Apply one augmentation to a (N, C, D, H, W) patch and its annotation.

    Ops: ("flip", axis), ("rot90", k) in the transverse x-y plane,
    ("scale", s) with trilinear resampling about the patch center, and
    ("translate",) which draws an integer shift within the nodule radius
    (requires an annotation and the rng). The annotation must be in
    patch-local voxel coordinates; the transformed annotation is returned.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 5:
        raise ValueError(f"patch must be (N, C, D, H, W), got {patch.ndim}-D")
    size = (patch.shape[4], patch.shape[3], patch.shape[2])
    kind = op[0]

    if kind == "flip":
        axis = op[1]
        if axis not in _FLIP_AXES:
            raise ValueError(f"flip axis must be x, y or z, got {axis!r}")
        out = np.flip(patch, axis=_FLIP_AXES[axis]).copy()
        new_anno = _map_anno(anno, op, size)
        return out, new_anno

    if kind == "rot90":
        k = int(op[1])
        if k not in (1, 2, 3):
            raise ValueError(f"rotation count must be 1, 2 or 3, got {k}")
        if patch.shape[3] != patch.shape[4]:
            raise ValueError("transverse rotation needs a square x-y footprint")
        out = patch
        for _ in range(k):
            # one quarter turn: new(y', x') = old(y=x', x=W-1-y')
            out = np.flip(out.swapaxes(3, 4), axis=4)
        new_anno = _map_anno(anno, op, size)
        return np.ascontiguousarray(out), new_anno

    if kind == "scale":
        s = float(op[1])
        if not 0.9 <= s <= 1.1:
            raise ValueError(f"scale factor must lie in [0.9, 1.1], got {s}")
        sz, sy, sx = patch.shape[2], patch.shape[3], patch.shape[4]
        cz, cy, cx = (sz - 1) / 2.0, (sy - 1) / 2.0, (sx - 1) / 2.0
        z, y, x = np.meshgrid(
            cz + (np.arange(sz) - cz) / s,
            cy + (np.arange(sy) - cy) / s,
            cx + (np.arange(sx) - cx) / s,
            indexing="ij",
        )
        cval = float(patch.min())
        out = np.empty_like(patch)
        for n in range(patch.shape[0]):
            for c in range(patch.shape[1]):
                out[n, c] = map_coordinates(patch[n, c], [z, y, x], order=1,
                                            mode="constant", cval=cval)
        new_anno = None
        if anno is not None:
            centroid = augment_point(op, anno.centroid, size)
            new_anno = NoduleAnnotation(centroid=centroid,
                                        diameter=anno.diameter * s,
                                        scan_id=anno.scan_id)
        return out, new_anno

    if kind == "translate":
        if anno is None:
            raise ValueError("translate augmentation needs an annotation")
        if rng is None:
            raise ValueError("translate augmentation needs an rng")
        shift = np.round(_uniform_ball(rng, anno.diameter / 2.0)).astype(int)
        op = ("translate", tuple(int(v) for v in shift))
        out = _shift_patch(patch, shift, float(patch.min()))
        return out, _map_anno(anno, op, size)

    raise ValueError(f"unknown augmentation {kind!r}")


def _map_anno(anno, op, size):
    if anno is None:
        return None
    centroid = augment_point(op, anno.centroid, size)
    return NoduleAnnotation(centroid=centroid, diameter=anno.diameter,
                            scan_id=anno.scan_id)


def _shift_patch(patch, shift_xyz, cval):
    out = np.full_like(patch, cval)
    src = [slice(None), slice(None)]
    dst = [slice(None), slice(None)]
    # tensor axes (D, H, W) correspond to (z, y, x) shifts
    for axis_len, t in zip(patch.shape[2:], reversed(list(shift_xyz))):
        t = int(t)
        if abs(t) >= axis_len:
            return out
        if t >= 0:
            src.append(slice(0, axis_len - t))
            dst.append(slice(t, axis_len))
        else:
            src.append(slice(-t, axis_len))
            dst.append(slice(0, axis_len + t))
    out[tuple(dst)] = patch[tuple(src)]
    return out


def _uniform_ball(rng, radius: float) -> np.ndarray:
    """Uniform draw from the closed ball of the given radius."""
    while True:
        v = rng.uniform(-1.0, 1.0, size=3)
        if v @ v <= 1.0:
            return v * radius


# ---------------------------------------------------------------------------
# patch sampling


def _int_point(p):
    return tuple(int(round(float(v))) for v in p)


def _positive_center(anno: NoduleAnnotation, vol: Volume, rng):
    """Integer crop center within the nodule radius of the centroid."""
    r = anno.diameter / 2.0
    for _ in range(32):
        c = _int_point(np.asarray(anno.centroid) + _uniform_ball(rng, r))
        if math.dist(c, anno.centroid) <= r and vol.contains(c):
            return c
    c = _int_point(anno.centroid)
    return c if vol.contains(c) else tuple(
        min(max(v, 0), d - 1) for v, d in zip(c, vol.dims)
    )


def _negative_center(vol: Volume, annos, rng, hard_negative_fraction: float):
    """Integer center at least one diameter from every annotation."""
    mimics = vol.meta.get("mimic_centers", [])
    for _ in range(256):
        if mimics and rng.uniform() < hard_negative_fraction:
            base = mimics[int(rng.integers(len(mimics)))]
            c = _int_point(np.asarray(base) + rng.integers(-2, 3, size=3))
        else:
            c = tuple(int(rng.integers(0, d)) for d in vol.dims)
        if not vol.contains(c):
            continue
        if all(math.dist(c, a.centroid) >= a.diameter for a in annos):
            return c
    raise PlacementError("could not sample a negative center clear of all nodules")


def _augment_positive(patch, local_anno, local_prop, rng, allow_scale=True):
    size = (patch.shape[4], patch.shape[3], patch.shape[2])
    ops = []
    for axis in ("x", "y", "z"):
        if rng.uniform() < 0.5:
            ops.append(("flip", axis))
    k = int(rng.integers(0, 4))
    if k:
        ops.append(("rot90", k))
    if allow_scale and rng.uniform() < 0.3:
        ops.append(("scale", float(rng.uniform(0.9, 1.1))))
    for op in ops:
        patch, local_anno = augment(patch, local_anno, op, rng)
        local_prop = augment_point(op, local_prop, size)
    return patch, local_anno, local_prop


def sample_training_patches(vol: Volume, annos, patch_size, n_patches: int,
                            pos_fraction: float, rng, pad_value=None,
                            hard_negative_fraction: float = 0.3,
                            augment_positives: bool = False) -> TrainBatch:
    """Draw labeled patches from one volume.

    Positives are centered within the nodule radius of an annotation;
    negatives are centered at least one diameter away from every
    annotation (mimic centers are preferred with probability
    hard_negative_fraction). Annotations and proposal positions in the
    returned batch are in patch-local voxel coordinates.
    """
    patch_size = tuple(int(v) for v in patch_size)
    n_pos = int(round(n_patches * pos_fraction))
    if n_pos > 0 and not annos:
        raise ValueError("positives requested but the volume has no annotations")
    if pad_value is None:
        pad_value = float(vol.data.min())
    center_local = tuple(s // 2 for s in patch_size)
    patches, labels, annotations, proposals = [], [], [], []
    for i in range(n_patches):
        if i < n_pos:
            anno = annos[int(rng.integers(len(annos)))]
            c = _positive_center(anno, vol, rng)
            patch = crop_patch(vol, c, patch_size, pad_value)
            start = tuple(ci - si // 2 for ci, si in zip(c, patch_size))
            local = NoduleAnnotation(
                centroid=tuple(g - s for g, s in zip(anno.centroid, start)),
                diameter=anno.diameter,
                scan_id=anno.scan_id,
            )
            prop = center_local
            if augment_positives:
                patch, local, prop = _augment_positive(patch, local, prop, rng)
            patches.append(patch)
            labels.append(1)
            annotations.append(local)
            proposals.append(prop)
        else:
            c = _negative_center(vol, annos, rng, hard_negative_fraction)
            patches.append(crop_patch(vol, c, patch_size, pad_value))
            labels.append(0)
            annotations.append(None)
            proposals.append(center_local)
    return TrainBatch(
        patches=np.concatenate(patches, axis=0),
        labels=np.asarray(labels),
        annotations=annotations,
        proposal_positions=proposals,
    )


def make_patch_sampler(corpus, patch_size, pos_fraction: float = 0.5,
                       hard_negative_fraction: float = 0.3,
                       augment_positives: bool = True):
    """Batch sampler over a list of (Volume, annotations) pairs.

    Returns sampler(rng, n) -> TrainBatch mixing volumes uniformly;
    suitable for both training stages (pick the matching patch_size).
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must contain at least one volume")
    with_nodules = [pair for pair in corpus if pair[1]]
    if not with_nodules and pos_fraction > 0:
        raise ValueError("positives requested but no volume has annotations")

    def sampler(rng, n):
        n_pos = int(round(n * pos_fraction))
        batches = []
        for i in range(n):
            pool = with_nodules if i < n_pos else corpus
            vol, annos = pool[int(rng.integers(len(pool)))]
            want_pos = 1.0 if i < n_pos else 0.0
            batches.append(sample_training_patches(
                vol, annos, patch_size, 1, want_pos, rng,
                hard_negative_fraction=hard_negative_fraction,
                augment_positives=augment_positives,
            ))
        return TrainBatch(
            patches=np.concatenate([b.patches for b in batches], axis=0),
            labels=np.concatenate([b.labels for b in batches]),
            annotations=[b.annotations[0] for b in batches],
            proposal_positions=[b.proposal_positions[0] for b in batches],
        )

    return sampler
