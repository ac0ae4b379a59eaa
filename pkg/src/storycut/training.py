"""Losses, ratio-balanced minibatch sampling and the two training loops."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .models import WINDOW, BanModel, ProposalHead, head_loss_and_grad
from .numerics import OptimConfig, sgd_momentum_step
from .temporal import FrameLabel, LabeledProposal, ProposalLabel

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, last_finite: Optional[float]):
        self.epoch = epoch
        self.step = step
        self.last_finite = last_finite
        super().__init__(f"non-finite loss at epoch {epoch} step {step}; last finite loss {last_finite}")


# ---------------------------------------------------------------------------
# losses


def smooth_l1(x):
    a = np.abs(x)
    out = np.where(a < 1.0, 0.5 * np.square(x), a - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def cross_entropy(probs, label: int) -> float:
    """-log probs[label], evaluated through log-sum-exp on the log-probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    with np.errstate(divide="ignore"):
        logits = np.log(p)
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[label])


def regression_loss(pred, target) -> float:
    return smooth_l1(pred[0] - target[0]) + smooth_l1(pred[1] - target[1])


def multitask_loss(p_story: float, pred_offsets, labeled: LabeledProposal, lam: float) -> float:
    """Binary cross-entropy, plus ``lam`` times the boundary loss for positives."""
    if labeled.label == ProposalLabel.IGNORE:
        raise ValueError("ignored proposals carry no loss")
    positive = labeled.label == ProposalLabel.POSITIVE
    loss = cross_entropy([1.0 - p_story, p_story], int(positive))
    if positive:
        loss += lam * regression_loss(pred_offsets, labeled.reg_targets)
    return loss


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 70
    batch_size: int = 256
    lam: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        self.optim()  # validates the optimizer fields

    def optim(self) -> OptimConfig:
        return OptimConfig(self.learning_rate, self.momentum, self.weight_decay)

    # full-scale schedules; the desk-scale ones live in experiments.py
    @classmethod
    def reference_ban(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(learning_rate=0.001, weight_decay=0.0005, epochs=70), **kw})

    @classmethod
    def reference_head(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(learning_rate=0.001, weight_decay=0.0008, epochs=40), **kw})

    def to_dict(self):
        return asdict(self)


@dataclass
class SamplingPlan:
    ban_ratio: Tuple[int, int, int, int] = (6, 6, 1, 1)  # within, background, begin, end
    head_pos_neg: Tuple[int, int] = (1, 3)

    def __post_init__(self):
        self.ban_ratio = tuple(int(x) for x in self.ban_ratio)
        self.head_pos_neg = tuple(int(x) for x in self.head_pos_neg)
        if len(self.ban_ratio) != 4 or len(self.head_pos_neg) != 2:
            raise ValueError("ban_ratio needs 4 entries and head_pos_neg 2")
        if min(self.ban_ratio + self.head_pos_neg) < 1:
            raise ValueError("sampling ratio entries must be >= 1")

    def to_dict(self):
        return {"ban_ratio": list(self.ban_ratio), "head_pos_neg": list(self.head_pos_neg)}


def ratio_counts(ratio: Sequence[int], total: int) -> List[int]:
    """Split ``total`` proportionally to ``ratio`` by largest remainder (ties to lower index)."""
    s = sum(ratio)
    quotas = [total * r / s for r in ratio]
    counts = [math.floor(q) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# sampling


class BanSampler:
    """Category pools of (video, frame) pairs for ratio-balanced window sampling."""

    def __init__(self, targets: Sequence[np.ndarray], plan: SamplingPlan):
        self.plan = plan
        vids = np.concatenate([np.full(len(t), i, dtype=np.int64) for i, t in enumerate(targets)]) if targets else np.zeros(0, np.int64)
        frames = np.concatenate([np.arange(len(t)) for t in targets]) if targets else np.zeros(0, np.int64)
        labels = np.concatenate([np.asarray(t) for t in targets]) if targets else np.zeros(0, np.int64)
        self.total_frames = len(labels)
        self.pools = []
        for cat in FrameLabel:
            idx = np.flatnonzero(labels == cat)
            if len(idx) == 0:
                raise ValueError(f"no training frames in category {cat.name}")
            self.pools.append((vids[idx], frames[idx]))

    def draw(self, batch_size: int, rng: np.random.Generator):
        """Return (video indices, frame indices, labels) for one minibatch."""
        counts = ratio_counts(self.plan.ban_ratio, batch_size)
        v, f, y = [], [], []
        for cat, (cnt, (pv, pf)) in enumerate(zip(counts, self.pools)):
            pick = rng.integers(0, len(pv), size=cnt)
            v.append(pv[pick])
            f.append(pf[pick])
            y.append(np.full(cnt, cat, dtype=np.int64))
        return np.concatenate(v), np.concatenate(f), np.concatenate(y)


def sample_ban_minibatch(targets, plan: SamplingPlan, batch_size: int, rng) -> List[Tuple[int, int]]:
    v, f, _ = BanSampler(targets, plan).draw(batch_size, rng)
    return list(zip(v.tolist(), f.tolist()))


def window_indices(num_frames: int, centers) -> np.ndarray:
    """Frame indices of the 7-frame windows around ``centers``, edge frames replicated."""
    half = WINDOW // 2
    idx = np.asarray(centers)[:, None] + np.arange(-half, half + 1)[None, :]
    return np.clip(idx, 0, num_frames - 1)


def gather_windows(features: Sequence[np.ndarray], vids, frames) -> np.ndarray:
    out = np.empty((len(vids), WINDOW, features[0].shape[1]))
    for v in np.unique(vids):
        sel = np.flatnonzero(vids == v)
        feat = features[v]
        out[sel] = feat[window_indices(len(feat), frames[sel])]
    return out


class HeadSampler:
    def __init__(self, labeled: Sequence[LabeledProposal], plan: SamplingPlan):
        self.plan = plan
        self.pos = [i for i, p in enumerate(labeled) if p.label == ProposalLabel.POSITIVE]
        self.neg = [i for i, p in enumerate(labeled) if p.label == ProposalLabel.NEGATIVE]
        if not self.pos:
            raise ValueError("no positive proposals to sample")
        if not self.neg:
            raise ValueError("no negative proposals to sample")
        self.pos = np.array(self.pos)
        self.neg = np.array(self.neg)

    def draw(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        n_pos, n_neg = ratio_counts(self.plan.head_pos_neg, batch_size)
        return np.concatenate([self.pos[rng.integers(0, len(self.pos), n_pos)], self.neg[rng.integers(0, len(self.neg), n_neg)]])


def sample_head_minibatch(labeled: Sequence[LabeledProposal], plan: SamplingPlan, batch_size: int, rng) -> List[LabeledProposal]:
    return [labeled[i] for i in HeadSampler(labeled, plan).draw(batch_size, rng)]


# ---------------------------------------------------------------------------
# training loops


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    cls_loss: float
    reg_loss: float = 0.0


def _check(loss, epoch, step, last):
    if not math.isfinite(loss):
        raise DivergenceError(epoch, step, last)
    return loss


def train_ban(
    features: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    config: TrainConfig,
    plan: Optional[SamplingPlan] = None,
    model: Optional[BanModel] = None,
    hidden: int = 64,
) -> Tuple[BanModel, List[EpochLog]]:
    """Fit the frame scorer with ratio-balanced window minibatches.

    One epoch is ``ceil(total_frames / batch_size)`` draws with replacement.
    """
    if not features:
        raise ValueError("empty dataset")
    plan = plan or SamplingPlan()
    if model is None:
        model = BanModel(features[0].shape[1], hidden=hidden, seed=config.seed)
    sampler = BanSampler(targets, plan)
    rng = np.random.default_rng([config.seed, 1])
    optim = config.optim()
    steps = math.ceil(sampler.total_frames / config.batch_size)
    history = []
    last = None
    for epoch in range(config.epochs):
        total = 0.0
        for step in range(steps):
            v, f, y = sampler.draw(config.batch_size, rng)
            loss = _check(model.loss_and_grad(gather_windows(features, v, f), y), epoch, step, last)
            sgd_momentum_step(model.store, optim)
            last = loss
            total += loss
        history.append(EpochLog(epoch, total / steps, total / steps))
        log.info("ban epoch %d loss %.5f", epoch, total / steps)
    return model, history


@dataclass
class HeadSample:
    features: np.ndarray  # (L, D) slice of the video covering the proposal
    labeled: LabeledProposal


def train_proposal_head(
    samples: Sequence[HeadSample],
    config: TrainConfig,
    plan: Optional[SamplingPlan] = None,
    model: Optional[ProposalHead] = None,
    **head_kw,
) -> Tuple[ProposalHead, List[EpochLog]]:
    """Fit the proposal head on positive/negative proposals (ignored ones are dropped)."""
    samples = [s for s in samples if s.labeled.label != ProposalLabel.IGNORE]
    if not samples:
        raise ValueError("no labeled proposals")
    plan = plan or SamplingPlan()
    if model is None:
        model = ProposalHead(samples[0].features.shape[1], seed=config.seed, **head_kw)
    sampler = HeadSampler([s.labeled for s in samples], plan)
    labels = np.array([1.0 if s.labeled.label == ProposalLabel.POSITIVE else 0.0 for s in samples])
    targets = np.array([s.labeled.reg_targets or (0.0, 0.0) for s in samples])
    rng = np.random.default_rng([config.seed, 2])
    optim = config.optim()
    steps = math.ceil(len(samples) / config.batch_size)
    history = []
    last = None
    for epoch in range(config.epochs):
        tot = cls = reg = 0.0
        for step in range(steps):
            idx = np.sort(sampler.draw(config.batch_size, rng))
            parts = {}
            model.store.zero_grad()
            loss = head_loss_and_grad(
                model.params(), model.grads(), [samples[i].features for i in idx], labels[idx], targets[idx], config.lam, parts
            )
            _check(loss, epoch, step, last)
            sgd_momentum_step(model.store, optim)
            last = loss
            tot += loss
            cls += parts["cls"]
            reg += parts["reg"]
        history.append(EpochLog(epoch, tot / steps, cls / steps, reg / steps))
        log.info("head epoch %d loss %.5f", epoch, tot / steps)
    return model, history


def write_loss_csv(history: Sequence[EpochLog], path) -> None:
    lines = ["epoch,mean_loss,cls_loss,reg_loss"]
    lines += [f"{h.epoch},{h.mean_loss:.8f},{h.cls_loss:.8f},{h.reg_loss:.8f}" for h in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
