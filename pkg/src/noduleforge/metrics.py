"""FROC analysis and CPM scoring.

A candidate is a true positive when it lies within the radius (inclusive)
of an unclaimed nodule centroid; extra candidates on an already-claimed
nodule are ignored rather than penalized. The FROC curve sweeps the
candidate probability threshold, and the CPM score averages sensitivity
at seven false-positive rates: 1/8, 1/4, 1/2, 1, 2, 4, and 8 per scan.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

from .screening import Candidate
from .volumes import NoduleAnnotation

CPM_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class FrocCurve:
    """Staircase of (fps_per_scan, sensitivity) points, fps ascending."""

    points: list[tuple[float, float]]
    n_scans: int
    n_nodules: int

    def __post_init__(self):
        self.points = sorted((float(f), float(s)) for f, s in self.points)
        for (f1, s1), (f2, s2) in zip(self.points, self.points[1:]):
            if f1 == f2:
                raise ValueError(f"duplicate fps_per_scan value {f1}")
            if s2 < s1:
                raise ValueError("sensitivity must be non-decreasing along the curve")
        if any(not 0 <= s <= 1 for _, s in self.points):
            raise ValueError("sensitivities must lie in [0, 1]")

    def sensitivity_at(self, fps_per_scan: float) -> float:
        """Step interpolation: value at the largest fps <= the query."""
        rates = [f for f, _ in self.points]
        i = bisect_right(rates, fps_per_scan)
        return self.points[i - 1][1] if i else 0.0


@dataclass
class CpmResult:
    per_rate: tuple[float, ...]
    cpm: float

    def __post_init__(self):
        if len(self.per_rate) != len(CPM_RATES):
            raise ValueError(f"expected {len(CPM_RATES)} sensitivities")


def hit_test(candidate, annotation: NoduleAnnotation) -> bool:
    """True when the candidate lies within the nodule radius, inclusive."""
    pos = candidate.position if isinstance(candidate, Candidate) else candidate
    return math.dist(pos, annotation.centroid) <= annotation.diameter / 2.0


@dataclass
class MatchResult:
    true_positives: list[tuple[Candidate, NoduleAnnotation]]
    false_positives: list[Candidate]
    ignored: list[Candidate]
    missed: list[NoduleAnnotation]


def match_candidates(cands, annos) -> MatchResult:
    """Greedy candidate-to-nodule assignment within one scan.

    Candidates are visited by descending probability (ties by position);
    each claims the nearest unclaimed nodule it hits. Hitting only
    claimed nodules is ignored; hitting nothing is a false positive.
    """
    order = sorted(cands, key=lambda c: (-c.probability, c.position))
    claimed = [False] * len(annos)
    tps, fps, ignored = [], [], []
    for c in order:
        hit_any = False
        best_i = None
        best_d = math.inf
        for i, a in enumerate(annos):
            d = math.dist(c.position, a.centroid)
            if d <= a.diameter / 2.0:
                hit_any = True
                if not claimed[i] and d < best_d:
                    best_i, best_d = i, d
        if best_i is not None:
            claimed[best_i] = True
            tps.append((c, annos[best_i]))
        elif hit_any:
            ignored.append(c)
        else:
            fps.append(c)
    missed = [a for a, cl in zip(annos, claimed) if not cl]
    return MatchResult(tps, fps, ignored, missed)


def froc(scans, n_scans: int | None = None) -> FrocCurve:
    """FROC curve over a list of per-scan (candidates, annotations) pairs.

    Every distinct candidate probability is a threshold; the curve point
    at threshold t counts matching over the candidates at or above t.
    Greedy matching is prefix-stable (lower-probability candidates never
    change earlier claims), so one descending sweep that records a point
    after each distinct probability level equals a per-threshold recount.
    """
    scans = [(list(c), list(a)) for c, a in scans]
    if not scans:
        raise ValueError("need at least one scan")
    if n_scans is None:
        n_scans = len(scans)
    n_nodules = sum(len(a) for _, a in scans)
    if n_nodules == 0:
        raise ValueError("need at least one annotation overall")

    events = []
    for si, (cands, _) in enumerate(scans):
        for c in cands:
            events.append((-c.probability, si, c.position, c))
    events.sort(key=lambda e: e[:3])

    claimed = [[False] * len(annos) for _, annos in scans]
    tp = fp = 0
    best: dict[float, float] = {}
    for k, (negp, si, _, c) in enumerate(events):
        annos = scans[si][1]
        hit_any = False
        best_i = None
        best_d = math.inf
        for i, a in enumerate(annos):
            d = math.dist(c.position, a.centroid)
            if d <= a.diameter / 2.0:
                hit_any = True
                if not claimed[si][i] and d < best_d:
                    best_i, best_d = i, d
        if best_i is not None:
            claimed[si][best_i] = True
            tp += 1
        elif not hit_any:
            fp += 1
        last_of_level = k + 1 == len(events) or events[k + 1][0] != negp
        if last_of_level:
            rate = fp / n_scans
            best[rate] = max(best.get(rate, 0.0), tp / n_nodules)
    return FrocCurve(points=sorted(best.items()), n_scans=n_scans,
                     n_nodules=n_nodules)


def cpm(curve: FrocCurve) -> CpmResult:
    """Mean sensitivity over the seven predefined FPs/scan rates."""
    per_rate = tuple(curve.sensitivity_at(r) for r in CPM_RATES)
    return CpmResult(per_rate=per_rate, cpm=sum(per_rate) / len(per_rate))


def cpm_from_sensitivities(per_rate) -> CpmResult:
    """CPM from sensitivities already measured at the seven rates."""
    per_rate = tuple(float(v) for v in per_rate)
    result = CpmResult(per_rate=per_rate, cpm=sum(per_rate) / len(per_rate))
    if any(not 0 <= v <= 1 for v in per_rate):
        raise ValueError("sensitivities must lie in [0, 1]")
    return result


def stage1_metrics(cands, annos, n_scans: int):
    """(sensitivity, fps_per_scan) of the raw screening output.

    A nodule counts as found when at least one same-scan candidate hits
    it; candidates hitting no nodule are false positives.
    """
    annos = list(annos)
    cands = list(cands)
    if not annos:
        raise ValueError("need at least one annotation")
    if n_scans < 1:
        raise ValueError("n_scans must be at least 1")
    by_scan: dict[str, list[Candidate]] = {}
    for c in cands:
        by_scan.setdefault(c.scan_id, []).append(c)
    found = 0
    for a in annos:
        found += any(hit_test(c, a) for c in by_scan.get(a.scan_id, []))
    anno_by_scan: dict[str, list[NoduleAnnotation]] = {}
    for a in annos:
        anno_by_scan.setdefault(a.scan_id, []).append(a)
    fp = sum(
        not any(hit_test(c, a) for a in anno_by_scan.get(c.scan_id, []))
        for c in cands
    )
    return found / len(annos), fp / n_scans
