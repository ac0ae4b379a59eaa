"""Whole-video inference: frame scoring, proposal generation, refinement, detection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .models import NUM_CATEGORIES, BanModel, BanParams, ProposalHead, ban_batch_proba
from .temporal import (
    FrameLabel,
    Interval,
    ScoredInterval,
    assign_proposal_labels,
    dilated_merge,
    extract_runs,
    nms,
)
from .training import HeadSample, window_indices

Detection = ScoredInterval


@dataclass
class PipelineConfig:
    max_gap: int = 5
    proposal_nms: float = 0.8
    detection_nms: float = 0.5
    rho: float = 0.1
    boundary_gating: bool = True

    def to_dict(self):
        return asdict(self)


def score_frames(ban: Union[BanModel, BanParams], features, chunk: int = 4096) -> np.ndarray:
    """(T, 4) category probabilities, one 7-frame window per frame (edges replicated)."""
    x = np.asarray(features, dtype=np.float64)
    T = x.shape[0]
    if T < 1:
        raise ValueError("video has no frames")
    params = ban.params() if isinstance(ban, BanModel) else ban
    out = np.empty((T, NUM_CATEGORIES))
    for lo in range(0, T, chunk):
        centers = np.arange(lo, min(T, lo + chunk))
        out[centers] = ban_batch_proba(params, x[window_indices(T, centers)])
    return out


def frame_labels(scores: np.ndarray) -> np.ndarray:
    # argmax takes the first maximum: ties go to the lower category index
    return np.argmax(scores, axis=1)


def generate_proposals(
    scores: np.ndarray,
    max_gap: int = 5,
    nms_thresh: float = 0.8,
    boundary_gating: bool = True,
) -> List[ScoredInterval]:
    """Runs of within-story frames, dilated merge, mean within-score, NMS.

    With ``boundary_gating`` a gap is never bridged if any frame inside it is
    labeled as a story beginning or ending.
    """
    labels = frame_labels(scores)
    runs = extract_runs(labels == FrameLabel.WITHIN)
    can_merge = None
    if boundary_gating:
        is_boundary = (labels == FrameLabel.BEGIN) | (labels == FrameLabel.END)
        csum = np.concatenate([[0], np.cumsum(is_boundary)])

        def can_merge(a, b):
            return csum[b] - csum[a] == 0

    merged = dilated_merge(runs, max_gap, can_merge)
    within = scores[:, FrameLabel.WITHIN]
    cands = [ScoredInterval(iv, float(np.clip(within[iv.start:iv.end].mean(), 0.0, 1.0))) for iv in merged]
    return nms(cands, nms_thresh)


def _as_interval(p) -> Interval:
    return p.interval if isinstance(p, ScoredInterval) else p


def augment_proposals(proposals: Sequence, rho: float = 0.25, num_frames: Optional[int] = None) -> list:
    """Extend each proposal by ``ceil(rho * length)`` frames on both sides, clipped to the video."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    out = []
    for p in proposals:
        iv = _as_interval(p)
        pad = math.ceil(rho * iv.length)
        end = iv.end + pad if num_frames is None else min(num_frames, iv.end + pad)
        new = Interval(max(0, iv.start - pad), end)
        out.append(ScoredInterval(new, p.score) if isinstance(p, ScoredInterval) else new)
    return out


def sliding_window_proposals(
    num_frames: int, scales: Sequence[int] = (30, 60, 120, 240), stride_fraction: float = 0.5
) -> List[ScoredInterval]:
    """Multi-scale windows fully inside the video, all scored 1.0, in enumeration order."""
    if not scales:
        raise ValueError("at least one scale is required")
    seen = set()
    out = []
    for L in scales:
        if L >= num_frames:
            wins = [Interval(0, num_frames)]
        else:
            stride = max(1, math.ceil(stride_fraction * L))
            wins = [Interval(s, s + L) for s in range(0, num_frames - L + 1, stride)]
        for w in wins:
            if w not in seen:
                seen.add(w)
                out.append(ScoredInterval(w, 1.0))
    return out


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_refinement(proposal: Interval, d_start: float, d_end: float, num_frames: int) -> Interval:
    """Shift boundaries by length-normalized offsets; falls back to ``proposal`` if degenerate."""
    L = proposal.length
    s = min(max(round_half_up(proposal.start + d_start * L), 0), num_frames - 1)
    e = min(max(round_half_up(proposal.end + d_end * L), 1), num_frames)
    if s >= e:
        return proposal
    return Interval(s, e)


def head_inputs(features: np.ndarray, proposals: Sequence) -> List[np.ndarray]:
    return [features[_as_interval(p).start:_as_interval(p).end] for p in proposals]


def refine_and_score(head: ProposalHead, features: np.ndarray, proposals: Sequence) -> List[Detection]:
    if not proposals:
        return []
    T = features.shape[0]
    p_story, offsets = head.predict(head_inputs(features, proposals))
    dets = []
    for prop, p, (ds, de) in zip(proposals, p_story, offsets):
        iv = apply_refinement(_as_interval(prop), float(ds), float(de), T)
        dets.append(Detection(iv, float(np.clip(p, 0.0, 1.0))))
    return dets


def propose(ban: BanModel, features: np.ndarray, config: PipelineConfig) -> List[ScoredInterval]:
    return generate_proposals(score_frames(ban, features), config.max_gap, config.proposal_nms, config.boundary_gating)


def truncate_video(ban: BanModel, head: ProposalHead, features, config: Optional[PipelineConfig] = None) -> List[Detection]:
    """Detected stories of one video, sorted by descending confidence."""
    config = config or PipelineConfig()
    x = np.asarray(features, dtype=np.float64)
    proposals = propose(ban, x, config)
    return detect_from_proposals(head, x, proposals, config)


def detect_from_proposals(head: ProposalHead, features: np.ndarray, proposals, config: PipelineConfig) -> List[Detection]:
    aug = augment_proposals(proposals, config.rho, features.shape[0])
    return nms(refine_and_score(head, features, aug), config.detection_nms)


# ---------------------------------------------------------------------------
# proposal-head training data


@dataclass
class HeadDataConfig:
    """How training proposals for the head are assembled per video.

    Model proposals and jittered copies of each story are augmented with the
    same ``rho`` used at inference; multi-scale sliding windows add negatives.
    """

    rho: float = 0.1
    jitter_copies: int = 4
    jitter_sigma: float = 0.1
    sw_scales: tuple = (30, 60, 120, 240)
    sw_stride: float = 0.5
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["sw_scales"] = list(self.sw_scales)
        return d


def head_candidates(
    num_frames: int,
    stories: Sequence[Interval],
    proposals: Sequence,
    cfg: HeadDataConfig,
    rng: np.random.Generator,
) -> List[Interval]:
    cands = [_as_interval(p) for p in augment_proposals(proposals, cfg.rho, num_frames)]
    for s in stories:
        for _ in range(cfg.jitter_copies):
            d0, d1 = rng.normal(0.0, cfg.jitter_sigma * s.length, size=2)
            a = min(max(0, s.start + round_half_up(d0)), num_frames - 1)
            b = min(max(a + 1, s.end + round_half_up(d1)), num_frames)
            cands.append(augment_proposals([Interval(a, b)], cfg.rho, num_frames)[0])
    cands += [w.interval for w in sliding_window_proposals(num_frames, cfg.sw_scales, cfg.sw_stride)]
    return cands


def build_head_samples(
    features: Sequence[np.ndarray],
    annotations,
    proposals_per_video: Optional[Sequence[Sequence]] = None,
    cfg: Optional[HeadDataConfig] = None,
) -> List[HeadSample]:
    """Labeled head training samples for every video (ignored proposals dropped)."""
    cfg = cfg or HeadDataConfig()
    samples = []
    for i, (x, ann) in enumerate(zip(features, annotations)):
        rng = np.random.default_rng([cfg.seed, i])
        props = proposals_per_video[i] if proposals_per_video is not None else []
        cands = head_candidates(ann.num_frames, ann.stories, props, cfg, rng)
        for lp in assign_proposal_labels(cands, ann.stories, cfg.pos_iou, cfg.neg_iou, ann.video_id):
            if lp.label != lp.label.IGNORE:
                samples.append(HeadSample(x[lp.proposal.start:lp.proposal.end], lp))
    return samples
