"""Command-line entry point: ``storycut <command> [flags]``.

Every command resolves its configuration as defaults <- ``--config`` JSON
<- ``--set section.key=value`` <- dedicated flags, and writes the resolved
config next to its outputs. Exit codes: 0 ok, 2 config or validation error,
3 I/O error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .data_io import (
    AnnotationError,
    FormatError,
    FrameFeatureSequence,
    SynthConfig,
    VideoAnnotation,
    atomic_write,
    model_from_checkpoint,
    model_to_checkpoint,
    read_annotations,
    read_checkpoint,
    read_features,
    read_scored,
    synth_generate,
    write_annotations,
    write_checkpoint,
    write_features,
    write_scored,
)
from .evaluation import EvalConfig, evaluate, report_csv
from .experiments import desk_ban_config, desk_head_config
from .models import BanModel, ProposalHead
from .pipeline import (
    HeadDataConfig,
    PipelineConfig,
    build_head_samples,
    detect_from_proposals,
    propose,
    sliding_window_proposals,
)
from .temporal import frame_targets
from .training import DivergenceError, SamplingPlan, TrainConfig, train_ban, train_proposal_head, write_loss_csv

log = logging.getLogger("storycut")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    ban_hidden: int = 32
    head_hidden: int = 16
    head_layers: int = 5
    fast_forward: bool = True


@dataclass
class RunConfig:
    """Everything a run depends on. ``seed`` overrides the seed of every section."""

    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig.easy)
    model: ModelConfig = field(default_factory=ModelConfig)
    ban_train: TrainConfig = field(default_factory=desk_ban_config)
    head_train: TrainConfig = field(default_factory=desk_head_config)
    plan: SamplingPlan = field(default_factory=SamplingPlan)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    head_data: HeadDataConfig = field(default_factory=HeadDataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for f in fields(self):
            if f.name != "seed":
                sec = getattr(self, f.name)
                out[f.name] = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


_SECTIONS = {f.name for f in fields(RunConfig)} - {"seed"}


def _section_types(cfg: RunConfig):
    return {name: type(getattr(cfg, name)) for name in _SECTIONS}


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(like, (tuple, list)):
        if isinstance(value, str):
            value = json.loads(value) if value.startswith("[") else value.split(",")
        elem = like[0] if like else float
        return tuple(_coerce(v, elem) for v in value)
    if isinstance(like, int):
        f = float(value)
        if f != int(f):
            raise ConfigError(f"expected an integer, got {value!r}")
        return int(f)
    if isinstance(like, float):
        return float(value)
    return str(value)


def resolve_config(doc: Optional[dict] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """Merge a (partial) config document and dotted overrides onto the defaults."""
    base = RunConfig()
    merged = {k: dict(v) for k, v in base.to_dict().items() if isinstance(v, dict)}
    seed = base.seed
    for src in (doc or {}), _nest(overrides or {}):
        for key, val in src.items():
            if key == "seed":
                seed = _coerce(val, 0)
            elif key in merged:
                if not isinstance(val, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                for k, v in val.items():
                    if k not in merged[key]:
                        raise ConfigError(f"unknown config key {key}.{k}")
                    merged[key][k] = _coerce(v, merged[key][k])
            else:
                raise ConfigError(f"unknown config section {key!r}")
    for sec in ("synth", "ban_train", "head_train", "head_data"):
        merged[sec]["seed"] = seed
    try:
        types = _section_types(base)
        return RunConfig(seed=seed, **{name: types[name](**merged[name]) for name in _SECTIONS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _nest(flat: Dict[str, object]) -> dict:
    out: dict = {}
    for key, val in flat.items():
        if key == "seed":
            out["seed"] = val
            continue
        sec, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"override {key!r} must look like section.key")
        out.setdefault(sec, {})[name] = val
    return out


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.synth.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    m = cfg.model
    if min(m.ban_hidden, m.head_hidden, m.head_layers) < 1:
        raise ConfigError("model widths and layer count must be >= 1")


# ---------------------------------------------------------------------------
# dataset directories


def load_dataset(data_dir) -> tuple:
    """(features, annotations) of a directory written by ``gen-data``, in manifest order."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    anns = {a.video_id: a for a in read_annotations(root / manifest["annotations"])}
    feats, out_anns = [], []
    for v in manifest["videos"]:
        seq = read_features(root / v["features"])
        ann = anns.get(v["video_id"])
        if ann is None:
            raise AnnotationError(f"video {v['video_id']!r} has no annotation")
        if seq.num_frames != ann.num_frames:
            raise AnnotationError(f"video {seq.video_id!r}: {seq.num_frames} feature rows, annotation says {ann.num_frames}")
        feats.append(seq.values)
        out_anns.append(ann)
    return feats, out_anns


def _write_config(path: Path, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    doc = cfg.to_dict()
    if extra:
        doc.update(extra)
    atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    data = synth_generate(cfg.synth)
    videos = []
    for seq, ann in data:
        rel = f"features/{seq.video_id}.trnf"
        write_features(out / rel, seq)
        videos.append({"video_id": seq.video_id, "num_frames": seq.num_frames, "features": rel})
    write_annotations(out / "annotations.json", [a for _, a in data])
    manifest = {"videos": videos, "annotations": "annotations.json", "config": cfg.to_dict()}
    atomic_write(out / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    _write_config(out / "config.json", cfg)
    log.info("wrote %d videos to %s", len(videos), out)
    return 0


def cmd_train_ban(args, cfg: RunConfig) -> int:
    feats, anns = load_dataset(args.data)
    targets = [frame_targets(a.num_frames, a.stories) for a in anns]
    model, hist = train_ban(feats, targets, cfg.ban_train, cfg.plan, hidden=cfg.model.ban_hidden)
    out = Path(args.out_checkpoint)
    write_checkpoint(out, model_to_checkpoint(model, {"train": cfg.ban_train.to_dict(), "plan": cfg.plan.to_dict()}))
    write_loss_csv(hist, _sidecar(out, "_loss.csv"))
    _write_config(_sidecar(out, "_config.json"), cfg)
    return 0


def _load_model(path, kind: str):
    ckpt = read_checkpoint(path)
    if ckpt.model_kind != kind:
        raise ConfigError(f"{path}: checkpoint holds a {ckpt.model_kind!r} model, expected {kind!r}")
    return model_from_checkpoint(ckpt)


def _proposals_in_order(path, anns: List[VideoAnnotation]):
    _, scored = read_scored(path)
    missing = [a.video_id for a in anns if a.video_id not in scored]
    if missing:
        raise ConfigError(f"proposal file lacks videos: {', '.join(missing)}")
    return [scored[a.video_id] for a in anns]


def cmd_train_head(args, cfg: RunConfig) -> int:
    if not args.proposals and not args.augment:
        raise ConfigError("train-head needs --proposals FILE or --augment")
    feats, anns = load_dataset(args.data)
    props = _proposals_in_order(args.proposals, anns) if args.proposals else None
    samples = build_head_samples(feats, anns, props, cfg.head_data)
    m = cfg.model
    model, hist = train_proposal_head(
        samples, cfg.head_train, cfg.plan, hidden=m.head_hidden, num_layers=m.head_layers, fast_forward=m.fast_forward
    )
    out = Path(args.out_checkpoint)
    extra = {"train": cfg.head_train.to_dict(), "plan": cfg.plan.to_dict(), "head_data": cfg.head_data.to_dict()}
    write_checkpoint(out, model_to_checkpoint(model, extra))
    write_loss_csv(hist, _sidecar(out, "_loss.csv"))
    _write_config(_sidecar(out, "_config.json"), cfg)
    return 0


def cmd_propose(args, cfg: RunConfig) -> int:
    feats, anns = load_dataset(args.data)
    if args.baseline == "sw":
        props = {a.video_id: sliding_window_proposals(a.num_frames, cfg.head_data.sw_scales, cfg.head_data.sw_stride) for a in anns}
    else:
        if not args.ban_checkpoint:
            raise ConfigError("propose needs --ban-checkpoint unless --baseline sw")
        ban = _load_model(args.ban_checkpoint, BanModel.kind)
        props = {a.video_id: propose(ban, x, cfg.pipeline) for x, a in zip(feats, anns)}
    out = Path(args.out)
    write_scored(out, {a.video_id: a.num_frames for a in anns}, props)
    _write_config(_sidecar(out, "_config.json"), cfg, {"baseline": args.baseline})
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    feats, anns = load_dataset(args.data)
    ban = _load_model(args.ban, BanModel.kind)
    head = _load_model(args.head, ProposalHead.kind)
    if args.proposals:
        props = _proposals_in_order(args.proposals, anns)
    else:
        props = [propose(ban, x, cfg.pipeline) for x in feats]
    frames = {a.video_id: a.num_frames for a in anns}
    dets = {a.video_id: detect_from_proposals(head, x, p, cfg.pipeline) for x, a, p in zip(feats, anns, props)}
    out = Path(args.out)
    write_scored(out, frames, dets)
    if args.proposals_out:
        write_scored(Path(args.proposals_out), frames, {a.video_id: p for a, p in zip(anns, props)})
    _write_config(_sidecar(out, "_config.json"), cfg)
    return 0


def _read_gt(path) -> Dict[str, list]:
    p = Path(path)
    anns = load_dataset(p)[1] if p.is_dir() else read_annotations(p)
    return {a.video_id: a.stories for a in anns}


def cmd_eval(args, cfg: RunConfig) -> int:
    gt = _read_gt(args.gt)
    _, dets = read_scored(args.detections)
    props = read_scored(args.proposals)[1] if args.proposals else None
    for name, d in (("detections", dets), ("proposals", props or {})):
        missing = sorted(set(d) - set(gt))
        if missing:
            raise ConfigError(f"{name} mention videos absent from ground truth: {', '.join(missing)}")
    report = evaluate(dets, gt, props, cfg.eval)
    out = Path(args.report)
    report_csv(report, out)
    _write_config(_sidecar(out, "_config.json"), cfg)
    for a, v in sorted(report.ap_at.items()):
        print(f"AP@{a:.2f} {v:.4f}")
    print(f"average mAP {report.average_map:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _parse_set(items) -> Dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="storycut", description="Story detection in long videos: data, training, inference, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (partial documents are merged onto defaults)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")

    def train_flags(sp, section):
        sp.add_argument("--epochs", type=int, dest=f"{section}.epochs")
        sp.add_argument("--lr", type=float, dest=f"{section}.learning_rate")
        sp.add_argument("--batch-size", type=int, dest=f"{section}.batch_size")
        sp.add_argument("--weight-decay", type=float, dest=f"{section}.weight_decay")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--num-videos", type=int, dest="synth.num_videos")
    g.add_argument("--signal-strength", type=float, dest="synth.signal_strength")
    g.add_argument("--id-prefix", dest="synth.id_prefix")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("train-ban", help="train the frame scorer")
    common(b)
    train_flags(b, "ban_train")
    b.add_argument("--data", required=True)
    b.add_argument("--out-checkpoint", required=True)
    b.set_defaults(func=cmd_train_ban)

    h = sub.add_parser("train-head", help="train the proposal classifier/regressor")
    common(h)
    train_flags(h, "head_train")
    h.add_argument("--data", required=True)
    h.add_argument("--out-checkpoint", required=True)
    h.add_argument("--proposals", help="proposals JSON for the training videos (from propose)")
    h.add_argument("--augment", action="store_true", help="train on jittered ground truth and sliding windows only")
    h.set_defaults(func=cmd_train_head)

    pr = sub.add_parser("propose", help="generate scored story proposals")
    common(pr)
    pr.add_argument("--data", required=True)
    pr.add_argument("--ban-checkpoint")
    pr.add_argument("--out", required=True)
    pr.add_argument("--baseline", choices=["sw"], help="multi-scale sliding windows instead of the frame scorer")
    pr.set_defaults(func=cmd_propose)

    i = sub.add_parser("infer", help="detect stories with both trained stages")
    common(i)
    i.add_argument("--data", required=True)
    i.add_argument("--ban", required=True)
    i.add_argument("--head", required=True)
    i.add_argument("--proposals", help="reuse these proposals instead of running the frame scorer")
    i.add_argument("--proposals-out", help="also write the proposals used")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections against ground truth")
    common(e)
    e.add_argument("--detections", required=True)
    e.add_argument("--gt", required=True, help="annotations JSON or dataset directory")
    e.add_argument("--proposals", help="proposals for the AR-AN curve (defaults to the detections)")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def _overrides(args) -> Dict[str, object]:
    out: Dict[str, object] = dict(_parse_set(args.set))
    for key, val in vars(args).items():
        if "." in key and val is not None:
            out[key] = val
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        doc = json.loads(Path(args.config).read_text()) if args.config else None
        cfg = resolve_config(doc, _overrides(args))
        _validate(cfg)
        return args.func(args, cfg)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, AnnotationError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
