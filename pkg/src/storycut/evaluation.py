"""Temporal detection metrics: AP at IoU thresholds, averaged mAP, AR-AN curves."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .data_io import atomic_write
from .temporal import Interval, ScoredInterval, iou_matrix

AVG_GRID = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass
class EvalConfig:
    map_thresholds: Tuple[float, ...] = (0.5, 0.7, 0.9)
    avg_map_grid: Tuple[float, ...] = AVG_GRID
    an_grid: Tuple[int, ...] = (1, 5, 10, 20, 50, 100)

    def __post_init__(self):
        for name in ("map_thresholds", "avg_map_grid"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(not 0 < v <= 1 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing values in (0, 1]")
            setattr(self, name, vals)
        self.an_grid = tuple(int(a) for a in self.an_grid)

    def to_dict(self):
        return {k: list(v) for k, v in vars(self).items()}


@dataclass
class EvalReport:
    ap_at: Dict[float, float] = field(default_factory=dict)
    average_map: float = 0.0
    ar_an: List[Tuple[int, float]] = field(default_factory=list)
    no_ground_truth: bool = False


def _ranked(detections: Mapping[str, Sequence[ScoredInterval]]):
    pooled = [(d.score, vid, d.start, d) for vid, ds in detections.items() for d in ds]
    pooled.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [(vid, d) for _, vid, _, d in pooled]


def _greedy_match(iou_row: np.ndarray, used: np.ndarray, alpha: float) -> int:
    """Index of the highest-IoU unused gt with IoU >= alpha (first on ties), or -1."""
    cand = np.where(used, -1.0, iou_row)
    j = int(np.argmax(cand)) if len(cand) else -1
    if j < 0 or cand[j] < alpha:
        return -1
    return j


def average_precision(
    detections: Mapping[str, Sequence[ScoredInterval]],
    gt: Mapping[str, Sequence[Interval]],
    alpha: float,
) -> float:
    """Non-interpolated AP of pooled, score-ranked detections at IoU >= ``alpha``.

    Each detection claims the best-overlapping unclaimed ground truth of its
    own video. AP is the sum of precision at every true positive divided by
    the number of ground-truth stories. Zero ground truth gives 0 and a
    ``RuntimeWarning``.
    """
    gt_sorted = {vid: sorted(g) for vid, g in gt.items()}
    n_gt = sum(len(g) for g in gt_sorted.values())
    if n_gt == 0:
        warnings.warn("no ground-truth stories: AP defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    used = {vid: np.zeros(len(g), dtype=bool) for vid, g in gt_sorted.items()}
    tp = 0
    total = 0.0
    for rank, (vid, d) in enumerate(_ranked(detections), start=1):
        g = gt_sorted.get(vid, [])
        if g:
            j = _greedy_match(iou_matrix([d.interval], g)[0], used[vid], alpha)
            if j >= 0:
                used[vid][j] = True
                tp += 1
                total += tp / rank
    return total / n_gt


def mean_ap_report(detections, gt, cfg: EvalConfig = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    no_gt = sum(len(g) for g in gt.values()) == 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cache = {}

        def ap(a):
            if a not in cache:
                cache[a] = average_precision(detections, gt, a)
            return cache[a]

        report = EvalReport(
            ap_at={a: ap(a) for a in cfg.map_thresholds},
            average_map=float(np.mean([ap(a) for a in cfg.avg_map_grid])),
            no_ground_truth=no_gt,
        )
    if no_gt:
        warnings.warn("no ground-truth stories: AP defined as 0", RuntimeWarning, stacklevel=2)
    return report


def _top(props: Sequence[ScoredInterval], n: int) -> List[ScoredInterval]:
    # stable sort keeps the given order among equal scores
    return sorted(props, key=lambda p: -p.score)[:n]


def recall_at(proposals, gt, alpha: float, an: int) -> Tuple[int, int]:
    """(matched gt count, total gt count) using the top-``an`` proposals of every video."""
    matched = total = 0
    for vid, g in gt.items():
        g = sorted(g)
        total += len(g)
        top = _top(proposals.get(vid, []), an)
        if not g or not top:
            continue
        ious = iou_matrix([p.interval for p in top], g)
        used = np.zeros(len(g), dtype=bool)
        for row in ious:
            j = _greedy_match(row, used, alpha)
            if j >= 0:
                used[j] = True
        matched += int(used.sum())
    return matched, total


def ar_an_curve(proposals, gt, cfg: EvalConfig = None) -> List[Tuple[int, float]]:
    """Average recall over the IoU grid versus proposals kept per video (pooled over videos)."""
    cfg = cfg or EvalConfig()
    curve = []
    for an in cfg.an_grid:
        recalls = []
        for a in cfg.avg_map_grid:
            m, n = recall_at(proposals, gt, a, an)
            recalls.append(m / n if n else 0.0)
        curve.append((an, float(np.mean(recalls))))
    return curve


def evaluate(detections, gt, proposals=None, cfg: EvalConfig = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    report = mean_ap_report(detections, gt, cfg)
    report.ar_an = ar_an_curve(proposals if proposals is not None else detections, gt, cfg)
    return report


def report_to_csv(report: EvalReport) -> str:
    lines = ["metric,threshold,value"]
    for a, v in sorted(report.ap_at.items()):
        lines.append(f"ap,{a:.2f},{v:.6f}")
    lines.append(f"average_map,0.50:0.95,{report.average_map:.6f}")
    lines.append("")
    lines.append("an,average_recall")
    for an, ar in report.ar_an:
        lines.append(f"{an},{ar:.6f}")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport, path) -> None:
    atomic_write(path, report_to_csv(report).encode("utf-8"))


def parse_report_csv(text: str) -> EvalReport:
    ap_part, _, curve_part = text.partition("\n\n")
    report = EvalReport()
    for row in csv.DictReader(io.StringIO(ap_part)):
        if row["metric"] == "ap":
            report.ap_at[float(row["threshold"])] = float(row["value"])
        elif row["metric"] == "average_map":
            report.average_map = float(row["value"])
    for row in csv.DictReader(io.StringIO(curve_part)):
        report.ar_an.append((int(row["an"]), float(row["average_recall"])))
    return report
