"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately written the slow, obvious way (nested
loops, exhaustive scans, per-threshold recounts) and shares no code with
the package internals it checks.
"""

import math

import numpy as np


def conv3d_loops(x, w, b, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Seven-nested-loop 3D cross-correlation."""
    N, C, D, H, W = x.shape
    O = w.shape[0]
    kD, kH, kW = w.shape[2:]
    sD, sH, sW = stride
    pD, pH, pW = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pD, pD), (pH, pH), (pW, pW)))
    Do = (D + 2 * pD - kD) // sD + 1
    Ho = (H + 2 * pH - kH) // sH + 1
    Wo = (W + 2 * pW - kW) // sW + 1
    out = np.zeros((N, O, Do, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for d in range(Do):
                for h in range(Ho):
                    for ww in range(Wo):
                        acc = b[o]
                        for c in range(C):
                            for i in range(kD):
                                for j in range(kH):
                                    for k in range(kW):
                                        acc += (w[o, c, i, j, k]
                                                * xp[n, c, d * sD + i, h * sH + j, ww * sW + k])
                        out[n, o, d, h, ww] = acc
    return out


def maxpool3d_loops(x, window, stride):
    """Exhaustive window scan with first-index tie breaking."""
    N, C, D, H, W = x.shape
    kD, kH, kW = window
    sD, sH, sW = stride
    Do = (D - kD) // sD + 1
    Ho = (H - kH) // sH + 1
    Wo = (W - kW) // sW + 1
    out = np.zeros((N, C, Do, Ho, Wo))
    arg = np.zeros((N, C, Do, Ho, Wo), dtype=np.int64)
    for n in range(N):
        for c in range(C):
            for d in range(Do):
                for h in range(Ho):
                    for ww in range(Wo):
                        best = -math.inf
                        best_idx = -1
                        for i in range(kD):
                            for j in range(kH):
                                for k in range(kW):
                                    di, hj, wk = d * sD + i, h * sH + j, ww * sW + k
                                    v = x[n, c, di, hj, wk]
                                    flat = (di * H + hj) * W + wk
                                    if v > best:
                                        best, best_idx = v, flat
                        out[n, c, d, h, ww] = best
                        arg[n, c, d, h, ww] = best_idx
    return out, arg


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar f at every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return g


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Relative agreement test with an absolute floor for tiny entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    return bool(np.all((rel <= rtol) | (np.abs(analytic - numeric) <= atol)))


def nms3d_greedy_loops(probs, threshold, radius, stride, offset, spacing=(1.0, 1.0, 1.0)):
    """O(n^2) greedy suppression on a (D, H, W) score grid.

    Returns a list of (position_xyz, prob) in emission order. Positions
    are mapped to image coordinates with the given per-axis stride and
    offset, both in (x, y, z) order; suppression distance is Euclidean in
    image coordinates scaled by `spacing`.
    """
    D, H, W = probs.shape
    entries = []
    for d in range(D):
        for h in range(H):
            for w in range(W):
                p = probs[d, h, w]
                if p >= threshold:
                    flat = (d * H + h) * W + w
                    pos = (offset[0] + stride[0] * w,
                           offset[1] + stride[1] * h,
                           offset[2] + stride[2] * d)
                    entries.append((p, flat, pos))
    entries.sort(key=lambda e: (-e[0], e[1]))
    kept = []
    for p, flat, pos in entries:
        ok = True
        for _, kpos in kept:
            dist = math.sqrt(sum(((a - b) * s) ** 2
                                 for a, b, s in zip(pos, kpos, spacing)))
            if dist <= radius:
                ok = False
                break
        if ok:
            kept.append((p, pos))
    return [(pos, p) for p, pos in kept]


def froc_recount(scans, n_nodules, n_scans):
    """Per-threshold recount oracle.

    `scans` is a list of (candidates, annotations) pairs where candidates
    are (position, prob) tuples and annotations are (centroid, diameter).
    Returns sorted (fps_per_scan, sensitivity) staircase points.
    """
    probs = sorted({p for cands, _ in scans for _, p in cands}, reverse=True)
    pts = {}
    for t in probs:
        tp = 0
        fp = 0
        for cands, annos in scans:
            kept = [(pos, p) for pos, p in cands if p >= t]
            kept.sort(key=lambda e: (-e[1], e[0]))
            claimed = [False] * len(annos)
            for pos, p in kept:
                hit_any = False
                hit_unclaimed = None
                best = None
                for ai, (centroid, diameter) in enumerate(annos):
                    dist = math.dist(pos, centroid)
                    if dist <= diameter / 2.0:
                        hit_any = True
                        if not claimed[ai] and (best is None or dist < best):
                            best, hit_unclaimed = dist, ai
                if hit_unclaimed is not None:
                    claimed[hit_unclaimed] = True
                    tp += 1
                elif not hit_any:
                    fp += 1
        rate = fp / n_scans
        sens = tp / n_nodules
        pts[rate] = max(pts.get(rate, 0.0), sens)
    return sorted(pts.items())
