"""Constructed evaluation fixtures shared by CLI and acceptance tests."""

from noduleforge.screening import Candidate
from noduleforge.volumes import NoduleAnnotation

# Published LUNA16 leaderboard rows (sensitivity at 1/8..8 FPs/scan).
DIAG_CONVNET = (0.692, 0.771, 0.809, 0.863, 0.895, 0.914, 0.923)
OUR_METHOD = (0.659, 0.745, 0.819, 0.865, 0.906, 0.933, 0.946)


def leaderboard_row_fixture(per_rate, n_scans=8, n_nodules=1000):
    """Candidates + annotations whose FROC reproduces a leaderboard row.

    Sensitivities must be multiples of 1/n_nodules. Nodules are laid out
    on a sparse line per scan; true positives sit exactly on centroids
    and false positives far from everything, with strictly decreasing
    probabilities ordered so that sensitivity at each of the seven rates
    (1/8 ... 8 FPs/scan) lands exactly on the requested value.
    """
    tp_counts = [round(s * n_nodules) for s in per_rate]
    fp_counts = [round(r * n_scans) for r in (0.125, 0.25, 0.5, 1, 2, 4, 8)]
    annos = []
    for i in range(n_nodules):
        annos.append(NoduleAnnotation(
            centroid=(50.0 + 60.0 * (i // n_scans), 50.0, 50.0),
            diameter=6.0,
            scan_id=f"scan{i % n_scans}",
        ))
    # sensitivity at rate k must equal tp_counts[k]: each TP block lands
    # right after the false-positive count reaches that rate
    events = [("tp", i) for i in range(tp_counts[0])]
    tp_done, fp_done = tp_counts[0], 0
    for level in range(7):
        while fp_done < fp_counts[level]:
            events.append(("fp", fp_done))
            fp_done += 1
        while tp_done < tp_counts[level]:
            events.append(("tp", tp_done))
            tp_done += 1
    cands = []
    for k, (kind, idx) in enumerate(events):
        p = 0.999 - k * 1e-4
        if kind == "tp":
            a = annos[idx]
            cands.append(Candidate(position=a.centroid, probability=p,
                                   scan_id=a.scan_id))
        else:
            cands.append(Candidate(
                position=(10.0 + 60.0 * idx, 10000.0, 50.0),
                probability=p,
                scan_id=f"scan{idx % n_scans}",
            ))
    return cands, annos
