"""Interval algebra and training-target construction on frame indices.

Intervals are half-open ``[start, end)`` over integer frame indices (1 fps).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True, order=True)
class Interval:
    start: int
    end: int

    def __post_init__(self):
        if not (isinstance(self.start, (int, np.integer)) and isinstance(self.end, (int, np.integer))):
            raise TypeError("interval bounds must be integers")
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"invalid interval [{self.start}, {self.end})")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))

    @property
    def length(self) -> int:
        return self.end - self.start

    def __repr__(self):
        return f"[{self.start},{self.end})"


@dataclass(frozen=True)
class ScoredInterval:
    interval: Interval
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite and in [0, 1], got {self.score}")

    @property
    def start(self):
        return self.interval.start

    @property
    def end(self):
        return self.interval.end


class FrameLabel(IntEnum):
    # order fixes the output channel layout of the frame scorer
    WITHIN = 0
    BACKGROUND = 1
    BEGIN = 2
    END = 3


class ProposalLabel(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORE = 2


@dataclass(frozen=True)
class LabeledProposal:
    proposal: Interval
    label: ProposalLabel
    matched_gt: Optional[Interval] = None
    reg_targets: Optional[Tuple[float, float]] = None
    video_id: Optional[str] = None

    def __post_init__(self):
        has = self.matched_gt is not None and self.reg_targets is not None
        if (self.label == ProposalLabel.POSITIVE) != has:
            raise ValueError("matched_gt and reg_targets are required exactly for positives")


def iou(a: Interval, b: Interval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def iou_matrix(a: Sequence[Interval], b: Sequence[Interval]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    sa = np.array([x.start for x in a])[:, None]
    ea = np.array([x.end for x in a])[:, None]
    sb = np.array([x.start for x in b])[None, :]
    eb = np.array([x.end for x in b])[None, :]
    inter = np.clip(np.minimum(ea, eb) - np.maximum(sa, sb), 0, None)
    union = (ea - sa) + (eb - sb) - inter
    return inter / union


def dilated_merge(
    runs: Sequence[Interval],
    max_gap: int = 5,
    can_merge: Optional[Callable[[int, int], bool]] = None,
) -> List[Interval]:
    """Fuse consecutive runs separated by at most ``max_gap`` frames.

    ``can_merge(gap_start, gap_end)`` may veto a fusion across the gap
    ``[gap_start, gap_end)``.
    """
    out: List[Interval] = []
    for r in runs:
        if out:
            prev = out[-1]
            if r.start < prev.end:
                raise ValueError("runs must be sorted by start and non-overlapping")
            gap = r.start - prev.end
            if gap <= max_gap and (can_merge is None or can_merge(prev.end, r.start)):
                out[-1] = Interval(prev.start, r.end)
                continue
        out.append(r)
    return out


def extract_runs(mask) -> List[Interval]:
    """Maximal runs of True in a boolean frame mask."""
    m = np.asarray(mask, dtype=bool)
    if m.size == 0:
        return []
    d = np.diff(np.concatenate([[0], m.astype(np.int8), [0]]))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [Interval(int(s), int(e)) for s, e in zip(starts, ends)]


def nms(candidates: Sequence[ScoredInterval], iou_thresh: float) -> List[ScoredInterval]:
    """Greedy 1-D non-maximum suppression.

    Equal scores are ordered by earlier start, then shorter length. A
    candidate is dropped when its IoU with a kept one exceeds ``iou_thresh``.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    order = sorted(candidates, key=lambda c: (-c.score, c.start, c.interval.length))
    keep: List[ScoredInterval] = []
    if not order:
        return keep
    ious = iou_matrix([c.interval for c in order], [c.interval for c in order])
    alive = np.ones(len(order), dtype=bool)
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ious[i, i + 1:] <= iou_thresh
    return keep


def frame_targets(num_frames: int, stories: Sequence[Interval], boundary_halfwidth: int = 1) -> np.ndarray:
    """Per-frame category labels (``FrameLabel`` values) for one video.

    Frames within ``boundary_halfwidth`` of a story's first frame are BEGIN,
    of its last frame END; remaining story frames WITHIN; the rest
    BACKGROUND. A frame claimed by several boundary windows goes to the
    nearest anchor, BEGIN on a tie.
    """
    stories = sorted(stories)
    for a, b in zip(stories, stories[1:]):
        if b.start < a.end:
            raise ValueError(f"overlapping stories {a} and {b}")
    if stories and stories[-1].end > num_frames:
        raise ValueError(f"story {stories[-1]} exceeds {num_frames} frames")

    labels = np.full(num_frames, FrameLabel.BACKGROUND, dtype=np.int64)
    for s in stories:
        labels[s.start:s.end] = FrameLabel.WITHIN
    dist = np.full(num_frames, np.inf)
    hw = boundary_halfwidth
    for s in stories:
        for anchor, lab in ((s.start, FrameLabel.BEGIN), (s.end - 1, FrameLabel.END)):
            lo, hi = max(0, anchor - hw), min(num_frames, anchor + hw + 1)
            for f in range(lo, hi):
                d = abs(f - anchor)
                if d < dist[f] or (d == dist[f] and lab == FrameLabel.BEGIN):
                    dist[f] = d
                    labels[f] = lab
    return labels


def assign_proposal_labels(
    proposals: Sequence[Interval],
    gt: Sequence[Interval],
    hi: float = 0.7,
    lo: float = 0.3,
    video_id: Optional[str] = None,
) -> List[LabeledProposal]:
    if not hi > lo:
        raise ValueError("hi must exceed lo")
    gt_sorted = sorted(gt)
    out = []
    ious = iou_matrix(list(proposals), gt_sorted)
    for k, p in enumerate(proposals):
        if not gt_sorted:
            out.append(LabeledProposal(p, ProposalLabel.NEGATIVE, video_id=video_id))
            continue
        j = int(np.argmax(ious[k]))  # first max == earliest start
        best = ious[k, j]
        if best > hi:
            g = gt_sorted[j]
            out.append(LabeledProposal(p, ProposalLabel.POSITIVE, g, regression_targets(p, g), video_id))
        elif best < lo:
            out.append(LabeledProposal(p, ProposalLabel.NEGATIVE, video_id=video_id))
        else:
            out.append(LabeledProposal(p, ProposalLabel.IGNORE, video_id=video_id))
    return out


def regression_targets(proposal: Interval, matched_gt: Interval) -> Tuple[float, float]:
    L = proposal.length
    return ((matched_gt.start - proposal.start) / L, (matched_gt.end - proposal.end) / L)
