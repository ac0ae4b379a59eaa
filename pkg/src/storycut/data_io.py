"""On-disk formats and the seeded synthetic long-video generator.

Formats
-------
Feature file (``.trnf``), little-endian::

    b"TRNF" | u32 version | u32 id_len | id (UTF-8) | u64 T | u64 D | T*D float32, row-major

Annotation / proposal / detection JSON::

    {"videos": [{"video_id": str, "num_frames": int,
                 "stories": [{"start": int, "end": int[, "score": float]}, ...]}, ...]}

Checkpoint (``.trnm``), little-endian::

    b"TRNM" | u32 version | u8 model_kind | u32 config_len | config JSON |
    repeated: u32 name_len | name | u64 rows | u64 cols | rows*cols float64
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .temporal import Interval, ScoredInterval

FEATURE_MAGIC = b"TRNF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"TRNM"
CHECKPOINT_VERSION = 1
MODEL_KINDS = {"ban": 0, "head": 1}
_KIND_BY_BYTE = {v: k for k, v in MODEL_KINDS.items()}


class FormatError(ValueError):
    def __init__(self, msg: str, offset: Optional[int] = None):
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")


class CheckpointVersionError(FormatError):
    def __init__(self, found: int, expected: int = CHECKPOINT_VERSION):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint version {found} is not supported (this build reads version {expected})", 4)


class AnnotationError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# features


@dataclass
class FrameFeatureSequence:
    video_id: str
    values: np.ndarray  # (T, D) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("feature values must be a (T, D) array with T >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.video_id}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def features_to_bytes(seq: FrameFeatureSequence) -> bytes:
    vid = seq.video_id.encode("utf-8")
    T, D = seq.values.shape
    head = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, len(vid)) + vid + struct.pack("<QQ", T, D)
    return head + seq.values.astype("<f4").tobytes(order="C")


def features_from_bytes(buf: bytes) -> FrameFeatureSequence:
    n = len(buf)
    if n < 12:
        raise FormatError(f"truncated header: need 12 bytes, found {n}", 0)
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {FEATURE_MAGIC!r}", 0)
    version, id_len = struct.unpack_from("<II", buf, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version} (expected {FEATURE_VERSION})", 4)
    off = 12
    if n < off + id_len + 16:
        raise FormatError(f"truncated header: need {off + id_len + 16} bytes, found {n}", off)
    try:
        vid = buf[off:off + id_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("video id is not valid UTF-8", off) from e
    off += id_len
    T, D = struct.unpack_from("<QQ", buf, off)
    off += 16
    if T < 1:
        raise FormatError("feature file declares zero frames", off - 16)
    expected = T * D * 4
    if expected > n - off:
        raise FormatError(
            f"truncated payload: expected {expected} bytes for {T}x{D} float32 values, found {n - off}", off
        )
    if expected < n - off:
        raise FormatError(f"trailing data: expected {expected} payload bytes, found {n - off}", off + expected)
    values = np.frombuffer(buf, dtype="<f4", count=T * D, offset=off).reshape(T, D)
    return FrameFeatureSequence(vid, values.astype(np.float64))


def write_features(path, seq: FrameFeatureSequence) -> None:
    atomic_write(path, features_to_bytes(seq))


def read_features(path) -> FrameFeatureSequence:
    return features_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# annotations


@dataclass
class VideoAnnotation:
    video_id: str
    num_frames: int
    stories: List[Interval] = field(default_factory=list)

    def validate(self) -> None:
        prev = None
        for s in self.stories:
            if s.end > self.num_frames:
                raise AnnotationError(f"video {self.video_id!r}: story {s} exceeds {self.num_frames} frames")
            if prev is not None and s.start < prev.end:
                raise AnnotationError(f"video {self.video_id!r}: stories {prev} and {s} overlap or are unsorted")
            prev = s


def _interval_from_json(d, video_id):
    try:
        return Interval(int(d["start"]), int(d["end"]))
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"video {video_id!r}: bad interval {d!r}: {e}") from e


def annotations_to_json(annotations: Sequence[VideoAnnotation]) -> str:
    doc = {
        "videos": [
            {
                "video_id": a.video_id,
                "num_frames": a.num_frames,
                "stories": [{"start": s.start, "end": s.end} for s in a.stories],
            }
            for a in annotations
        ]
    }
    return json.dumps(doc, indent=1)


def annotations_from_json(text: str) -> List[VideoAnnotation]:
    try:
        doc = json.loads(text)
        videos = doc["videos"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise AnnotationError(f"not an annotation document: {e}") from e
    out = []
    for v in videos:
        vid = v.get("video_id")
        ann = VideoAnnotation(str(vid), int(v["num_frames"]), [_interval_from_json(s, vid) for s in v["stories"]])
        ann.validate()
        out.append(ann)
    return out


def write_annotations(path, annotations: Sequence[VideoAnnotation]) -> None:
    for a in annotations:
        a.validate()
    atomic_write(path, annotations_to_json(annotations).encode("utf-8"))


def read_annotations(path) -> List[VideoAnnotation]:
    return annotations_from_json(Path(path).read_text())


def write_scored(path, num_frames: Dict[str, int], scored: Dict[str, Sequence[ScoredInterval]]) -> None:
    """Proposals or detections: the annotation layout with a score per entry."""
    doc = {
        "videos": [
            {
                "video_id": vid,
                "num_frames": num_frames[vid],
                "stories": [{"start": s.start, "end": s.end, "score": float(s.score)} for s in scored[vid]],
            }
            for vid in scored
        ]
    }
    atomic_write(path, json.dumps(doc, indent=1).encode("utf-8"))


def read_scored(path) -> Tuple[Dict[str, int], Dict[str, List[ScoredInterval]]]:
    try:
        doc = json.loads(Path(path).read_text())
        videos = doc["videos"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise AnnotationError(f"not a scored interval document: {e}") from e
    frames, out = {}, {}
    for v in videos:
        vid = str(v["video_id"])
        frames[vid] = int(v["num_frames"])
        items = []
        for s in v["stories"]:
            iv = _interval_from_json(s, vid)
            if iv.end > frames[vid]:
                raise AnnotationError(f"video {vid!r}: interval {iv} exceeds {frames[vid]} frames")
            items.append(ScoredInterval(iv, float(s.get("score", 1.0))))
        out[vid] = items
    return frames, out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    tensors: Dict[str, np.ndarray]
    format_version: int = CHECKPOINT_VERSION


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.model_kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {ckpt.model_kind!r}")
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IBI", ckpt.format_version, MODEL_KINDS[ckpt.model_kind], len(cfg)), cfg]
    for name, t in ckpt.tensors.items():
        arr = np.asarray(t, dtype=np.float64)
        if arr.ndim != 2:
            raise FormatError(f"tensor {name!r} is not 2-D")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<QQ", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    n = len(buf)
    if n < 13:
        raise FormatError(f"truncated checkpoint header: {n} bytes", 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version, kind, cfg_len = struct.unpack_from("<IBI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(version)
    if kind not in _KIND_BY_BYTE:
        raise FormatError(f"unknown model kind byte {kind}", 8)
    off = 13
    if off + cfg_len > n:
        raise FormatError(f"truncated config block: need {cfg_len} bytes, found {n - off}", off)
    try:
        config = json.loads(buf[off:off + cfg_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"config block is not valid JSON: {e}", off) from e
    off += cfg_len
    tensors: Dict[str, np.ndarray] = {}
    while off < n:
        if off + 4 > n:
            raise FormatError("truncated tensor name length", off)
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + name_len + 16 > n:
            raise FormatError("truncated tensor header", off)
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<QQ", buf, off)
        off += 16
        size = rows * cols * 8
        if off + size > n:
            raise FormatError(f"tensor {name!r}: expected {size} bytes, found {n - off}", off)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", off)
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += size
    return Checkpoint(_KIND_BY_BYTE[kind], config, tensors, version)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, checkpoint_to_bytes(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def model_to_checkpoint(model, extra: Optional[dict] = None) -> Checkpoint:
    cfg = {"model": model.config()}
    if extra:
        cfg.update(extra)
    return Checkpoint(model.kind, cfg, model.store.state_dict())


def model_from_checkpoint(ckpt: Checkpoint):
    from .models import BanModel, ProposalHead

    cls = BanModel if ckpt.model_kind == "ban" else ProposalHead
    model = cls(**ckpt.config["model"])
    model.store.load_state_dict(ckpt.tensors)
    return model


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    """Synthetic long videos with stories embedded in background noise.

    Defaults are the desk scale: 600-frame videos, about 5 one-minute stories.
    ``full_scale()`` returns the full-length statistics (80-minute videos,
    11 three-minute stories).
    """

    num_videos: int = 10
    frames_mean: int = 600
    frames_jitter: float = 0.2
    stories_per_video_mean: float = 5.0
    story_len_mean: int = 60
    story_len_sigma: float = 0.3
    min_story_len: int = 12
    min_gap: int = 10
    feature_dim: int = 32
    signal_strength: float = 3.0
    boundary_spike: float = 3.0
    audio_channels: int = 8
    seed: int = 0
    id_prefix: str = "video"

    @classmethod
    def full_scale(cls, **kw) -> "SynthConfig":
        return cls(**{**dict(frames_mean=4800, stories_per_video_mean=11.0, story_len_mean=180), **kw})

    @classmethod
    def easy(cls, **kw) -> "SynthConfig":
        return cls(**{**dict(signal_strength=3.0, boundary_spike=3.0), **kw})

    @classmethod
    def hard(cls, **kw) -> "SynthConfig":
        return cls(**{**dict(signal_strength=0.2, boundary_spike=0.4), **kw})

    def validate(self) -> None:
        if self.num_videos < 0:
            raise ValueError("num_videos must be >= 0")
        if not 0 <= self.frames_jitter < 1:
            raise ValueError("frames_jitter must lie in [0, 1)")
        if self.min_story_len < 3 or self.min_gap < 6:
            raise ValueError("min_story_len must be >= 3 and min_gap >= 6")
        if not 0 < self.audio_channels <= self.feature_dim:
            raise ValueError("audio_channels must lie in [1, feature_dim]")
        shortest = math.floor(self.frames_mean * (1 - self.frames_jitter))
        if shortest < self.min_story_len + 2 * self.min_gap:
            raise ValueError(f"videos of {shortest} frames cannot hold one story with its background margins")
        budget = self.stories_per_video_mean * max(self.story_len_mean, self.min_story_len)
        budget += (self.stories_per_video_mean + 1) * self.min_gap
        if budget > self.frames_mean:
            raise ValueError(
                f"infeasible geometry: {self.stories_per_video_mean} stories of ~{self.story_len_mean} frames "
                f"need ~{budget:.0f} frames but videos average {self.frames_mean}"
            )

    def to_dict(self):
        return asdict(self)


def _layout(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[int, List[Interval]]:
    lo = cfg.frames_mean * (1 - cfg.frames_jitter)
    hi = cfg.frames_mean * (1 + cfg.frames_jitter)
    T = int(round(rng.uniform(lo, hi)))
    n = max(1, int(rng.poisson(cfg.stories_per_video_mean)))
    mu = math.log(cfg.story_len_mean) - 0.5 * cfg.story_len_sigma ** 2
    lengths = [max(cfg.min_story_len, int(round(x))) for x in rng.lognormal(mu, cfg.story_len_sigma, size=n)]
    while len(lengths) > 1 and sum(lengths) + (len(lengths) + 1) * cfg.min_gap > T:
        lengths.pop()
    if sum(lengths) + 2 * cfg.min_gap > T:
        lengths = [T - 2 * cfg.min_gap]
    n = len(lengths)
    slack = T - sum(lengths) - (n + 1) * cfg.min_gap
    shares = rng.dirichlet(np.ones(n + 1)) * slack
    gaps = np.floor(shares).astype(int)
    gaps[-1] += slack - gaps.sum()
    gaps += cfg.min_gap
    stories = []
    pos = int(gaps[0])
    for k, L in enumerate(lengths):
        stories.append(Interval(pos, pos + L))
        pos += L + int(gaps[k + 1])
    return T, stories


def synth_video(cfg: SynthConfig, index: int) -> Tuple[FrameFeatureSequence, VideoAnnotation]:
    """Generate video ``index``; depends only on (config, seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    T, stories = _layout(rng, cfg)
    D = cfg.feature_dim
    x = rng.standard_normal((T, D))
    audio = slice(0, cfg.audio_channels)
    for s in stories:
        signature = cfg.signal_strength * rng.uniform(0.5, 1.5, size=D)
        x[s.start:s.end] += signature
        b0, b1 = max(0, s.start - 1), min(T, s.start + 2)
        e0, e1 = max(0, s.end - 2), min(T, s.end + 1)
        x[b0:b1, audio] += cfg.boundary_spike
        x[e0:e1, audio] -= cfg.boundary_spike
    vid = f"{cfg.id_prefix}_{index:04d}"
    return FrameFeatureSequence(vid, x), VideoAnnotation(vid, T, stories)


def synth_generate(cfg: SynthConfig) -> List[Tuple[FrameFeatureSequence, VideoAnnotation]]:
    cfg.validate()
    return [synth_video(cfg, i) for i in range(cfg.num_videos)]
