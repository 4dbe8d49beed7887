"""Boundary-detection metrics.

A segmentation is a set of boundary clip indices: index i means clip i is
the last clip of a topic. The video-final index never appears (the video
end is an implicit boundary). Fuzzy metrics compare boundary timestamps
(end time of the boundary clip) under a one-to-one matching within k
seconds.

Degenerate conventions, fixed and tested: empty-vs-empty scores 1.0,
one-sided-empty scores 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class TopicSegmentation:
    """Boundary indices plus the clip end-times needed for timed metrics."""

    n: int
    boundaries: tuple[int, ...]
    end_times: tuple[float, ...]

    def __post_init__(self):
        if len(self.end_times) != self.n:
            raise DataError(f"{self.n} clips but {len(self.end_times)} end times")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise DataError(f"boundaries not strictly increasing: {self.boundaries}")
        if self.boundaries and not (0 <= self.boundaries[0] and
                                    self.boundaries[-1] < self.n - 1):
            raise DataError(
                f"boundaries {self.boundaries} outside [0, {self.n - 1})")
        if any(t2 <= t1 for t1, t2 in zip(self.end_times, self.end_times[1:])):
            raise DataError("clip end times must be strictly increasing")

    @classmethod
    def from_labels(cls, labels, end_times) -> "TopicSegmentation":
        """Boundary indices from a 0/1 label vector; index n-1 is ignored."""
        labels = np.asarray(labels)
        n = len(labels)
        bounds = tuple(int(i) for i in np.nonzero(labels[: n - 1])[0])
        return cls(n=n, boundaries=bounds, end_times=tuple(float(t) for t in end_times))

    def boundary_times(self) -> tuple[float, ...]:
        return tuple(self.end_times[b] for b in self.boundaries)

    def duration(self) -> float:
        return self.end_times[-1] if self.n else 0.0


def _f1(tp: int, n_pred: int, n_gt: int) -> float:
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / n_pred
    recall = tp / n_gt
    return 2.0 * precision * recall / (precision + recall)


def exact_f1(pred: TopicSegmentation, gt: TopicSegmentation) -> float:
    """F1 of the positive (boundary) class under exact index matching."""
    if pred.n != gt.n:
        raise DataError(f"clip counts differ: pred {pred.n} vs gt {gt.n}")
    ps, gs = set(pred.boundaries), set(gt.boundaries)
    return _f1(len(ps & gs), len(ps), len(gs))


def match_within_k(pred_times, gt_times, k: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of sorted boundary times within k seconds.

    Candidate pairs are taken in ascending |dt| (ties: earlier ground
    truth first, then earlier prediction); a pair is accepted only if both
    endpoints are still unmatched.
    """
    pred_times = list(pred_times)
    gt_times = list(gt_times)
    cands = []
    for gi, gt_t in enumerate(gt_times):
        for pi, p_t in enumerate(pred_times):
            dt = abs(p_t - gt_t)
            if dt <= k:
                cands.append((dt, gi, pi))
    cands.sort()
    used_p, used_g, out = set(), set(), []
    for _, gi, pi in cands:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append((pi, gi))
    return out


def max_matching_size(pred_times, gt_times, k: float) -> int:
    """Exhaustive maximum-cardinality matching (test oracle, small inputs)."""
    pred_times, gt_times = list(pred_times), list(gt_times)
    edges = [[pi for pi, p in enumerate(pred_times) if abs(p - g) <= k]
             for g in gt_times]
    match_of_pred: dict[int, int] = {}

    def try_assign(gi: int, visited: set[int]) -> bool:
        for pi in edges[gi]:
            if pi in visited:
                continue
            visited.add(pi)
            if pi not in match_of_pred or try_assign(match_of_pred[pi], visited):
                match_of_pred[pi] = gi
                return True
        return False

    size = 0
    for gi in range(len(gt_times)):
        if try_assign(gi, set()):
            size += 1
    return size


def bs_at_k(pred: TopicSegmentation, gt: TopicSegmentation, k: float,
            matching: str = "one_to_one") -> float:
    """Recall of ground-truth boundaries matched by predictions within k seconds.

    `one_to_one` uses the greedy matching above; `loose` counts a ground
    truth as matched whenever any prediction lies within k.
    """
    pt, gtt = pred.boundary_times(), gt.boundary_times()
    if not gtt:
        return 1.0 if not pt else 0.0
    if matching == "loose":
        hit = sum(1 for g in gtt if any(abs(p - g) <= k for p in pt))
        return hit / len(gtt)
    return len(match_within_k(pt, gtt, k)) / len(gtt)


def f1_at_k(pred: TopicSegmentation, gt: TopicSegmentation, k: float) -> float:
    """F1 under one-to-one time matching within k seconds."""
    pt, gtt = pred.boundary_times(), gt.boundary_times()
    matched = len(match_within_k(pt, gtt, k))
    return _f1(matched, len(pt), len(gtt))


def boundaries_to_segments(seg: TopicSegmentation) -> list[tuple[float, float]]:
    """Half-open [start, end) intervals covering the full video extent."""
    cuts = [0.0] + [seg.end_times[b] for b in seg.boundaries] + [seg.duration()]
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def _interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def miou(pred: TopicSegmentation, gt: TopicSegmentation,
         symmetric: bool = True) -> float:
    """Mean best IoU between predicted and ground-truth segments.

    Symmetric form averages the gt->pred and pred->gt directions; the
    gt-direction-only variant is available for cross-checking.
    """
    ps = boundaries_to_segments(pred)
    gs = boundaries_to_segments(gt)
    gt_dir = float(np.mean([max(_interval_iou(g, p) for p in ps) for g in gs]))
    if not symmetric:
        return gt_dir
    pred_dir = float(np.mean([max(_interval_iou(p, g) for g in gs) for p in ps]))
    return 0.5 * (gt_dir + pred_dir)


CONSISTENCY_THRESHOLDS = (0.0, 2.0, 4.0, 6.0, 8.0)


def consistency_score(annotations: list[TopicSegmentation]) -> float:
    """Inter-annotator agreement: mean F1@k over annotator pairs, k in 0..8 s."""
    if len(annotations) < 2:
        raise DataError(f"consistency score needs >= 2 annotations, got {len(annotations)}")
    vals = []
    for i in range(len(annotations)):
        for j in range(i + 1, len(annotations)):
            for k in CONSISTENCY_THRESHOLDS:
                vals.append(f1_at_k(annotations[i], annotations[j], k))
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    """Corpus metrics (fractions in [0,1]; rendered x100 for display)."""

    f1: float
    bs_at_k: float
    f1_at_k: float
    miou: float
    avg: float
    k: float
    bs_matching: str = "one_to_one"
    miou_symmetric: bool = True
    per_video: dict[str, dict[str, float]] = field(default_factory=dict)

    COLUMNS = ("f1", "bs_at_k", "f1_at_k", "miou", "avg")


def avg_score(report: MetricsReport) -> float:
    """Arithmetic mean of the four headline metrics."""
    return (report.f1 + report.bs_at_k + report.f1_at_k + report.miou) / 4.0


def video_metrics(pred: TopicSegmentation, gt: TopicSegmentation, k: float,
                  bs_matching: str = "one_to_one",
                  miou_symmetric: bool = True) -> dict[str, float]:
    vals = {
        "f1": exact_f1(pred, gt),
        "bs_at_k": bs_at_k(pred, gt, k, matching=bs_matching),
        "f1_at_k": f1_at_k(pred, gt, k),
        "miou": miou(pred, gt, symmetric=miou_symmetric),
    }
    vals["avg"] = (vals["f1"] + vals["bs_at_k"] + vals["f1_at_k"] + vals["miou"]) / 4.0
    return vals


def evaluate_segmentations(preds: dict[str, TopicSegmentation],
                           gts: dict[str, TopicSegmentation], k: float,
                           bs_matching: str = "one_to_one",
                           miou_symmetric: bool = True) -> MetricsReport:
    """Per-video metrics plus unweighted corpus means."""
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise DataError(f"predictions missing for videos: {', '.join(missing)}")
    per_video = {}
    for vid in sorted(gts):
        per_video[vid] = video_metrics(preds[vid], gts[vid], k,
                                       bs_matching=bs_matching,
                                       miou_symmetric=miou_symmetric)
    def mean_of(name):
        return float(np.mean([v[name] for v in per_video.values()])) if per_video else 0.0
    report = MetricsReport(
        f1=mean_of("f1"), bs_at_k=mean_of("bs_at_k"), f1_at_k=mean_of("f1_at_k"),
        miou=mean_of("miou"), avg=0.0, k=k,
        bs_matching=bs_matching, miou_symmetric=miou_symmetric,
        per_video=per_video)
    report.avg = avg_score(report)
    return report


def render_report(report: MetricsReport) -> str:
    """Stable text rendering, values x100 with 2 decimals."""
    kint = int(report.k) if float(report.k).is_integer() else report.k
    lines = [
        f"k_seconds = {report.k:g}",
        f"bs_matching = {report.bs_matching}",
        f"miou_symmetric = {str(report.miou_symmetric).lower()}",
        "",
        f"metric\tF1\tBS@{kint}\tF1@{kint}\tmIoU\tAvg",
        "corpus\t" + "\t".join(
            f"{100.0 * getattr(report, c):.2f}" for c in MetricsReport.COLUMNS),
        "",
    ]
    for vid in sorted(report.per_video):
        v = report.per_video[vid]
        lines.append(vid + "\t" + "\t".join(
            f"{100.0 * v[c]:.2f}" for c in MetricsReport.COLUMNS))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricsReport:
    """Inverse of render_report (corpus row and header only)."""
    lines = text.splitlines()
    k = float(lines[0].split("=")[1])
    bs_matching = lines[1].split("=")[1].strip()
    miou_symmetric = lines[2].split("=")[1].strip() == "true"
    corpus = None
    per_video = {}
    for line in lines[4:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "metric":
            continue
        vals = [float(x) / 100.0 for x in parts[1:]]
        entry = dict(zip(MetricsReport.COLUMNS, vals))
        if parts[0] == "corpus":
            corpus = entry
        else:
            per_video[parts[0]] = entry
    if corpus is None:
        raise DataError("report lacks a corpus row")
    return MetricsReport(f1=corpus["f1"], bs_at_k=corpus["bs_at_k"],
                         f1_at_k=corpus["f1_at_k"], miou=corpus["miou"],
                         avg=corpus["avg"], k=k, bs_matching=bs_matching,
                         miou_symmetric=miou_symmetric, per_video=per_video)
