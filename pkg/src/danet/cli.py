"""Command-line harness: gradcheck, train, eval, infer, ablation, gen-data.

Exit codes: 0 success, 1 failed check or training abort, 2 I/O or
configuration error.  Every file is written under the output directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, Toggles, load_config, toy_config
from .data import (
    DataError,
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_image,
    load_manifest,
    load_split,
    write_dataset,
)
from .detector.model import Detector
from .detector.train import TrainingError, evaluate, infer, load_model, save_model, train
from .metrics import table_row

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_IO = 2

CHECKPOINT_NAME = "checkpoint.dant"
LOSS_CSV = "loss.csv"

# ablation lattice: each phase adds one component to the previous one
PHASES = (
    ("phase1-baseline", Toggles(fpn=False, dcn=False, cbam=False, focal=False)),
    ("phase2-fpn", Toggles(fpn=True, dcn=False, cbam=False, focal=False)),
    ("phase3-fpn-dcn", Toggles(fpn=True, dcn=True, cbam=False, focal=False)),
    ("phase4-fpn-dcn-cbam", Toggles(fpn=True, dcn=True, cbam=True, focal=False)),
    ("phase5-danet", Toggles(fpn=True, dcn=True, cbam=True, focal=True)),
)


def _log(msg: str) -> None:
    print(msg, flush=True)


def resolve_config(config_path: Optional[str], seed: Optional[int], out: Optional[str]) -> RunConfig:
    cfg = load_config(config_path) if config_path else toy_config()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_dir = out
    return cfg


def datasets(cfg: RunConfig) -> tuple[list, list]:
    """Train and test samples: the manifest splits, or one seeded synthetic draw split in two."""
    d = cfg.data
    if d.manifest:
        if not (d.image_dir and d.annotation_dir):
            raise ConfigError("data.manifest needs data.image_dir and data.annotation_dir")
        manifest = load_manifest(d.manifest)
        if tuple(manifest.classes) != tuple(cfg.classes):
            raise ConfigError(f"manifest classes {manifest.classes} differ from config classes {list(cfg.classes)}")
        return (
            load_split(manifest, "train", d.image_dir, d.annotation_dir),
            load_split(manifest, "test", d.image_dir, d.annotation_dir),
        )
    if d.synthetic is None:
        raise ConfigError("config needs either data.manifest or data.synthetic")
    s = d.synthetic
    spec = SyntheticSpec(s.image_size, s.min_objects, s.max_objects, s.min_side, s.max_side, s.noise, cfg.seed, tuple(cfg.classes))
    samples = generate_synthetic(spec, s.n_train + s.n_test)
    return samples[: s.n_train], samples[s.n_train :]


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_run(cfg: RunConfig, out: Path, train_samples: Sequence, quiet: bool = False) -> Detector:
    model = Detector(cfg)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    def progress(row: dict) -> None:
        if not quiet and row["step"] % 25 == 0:
            _log(f"epoch {row['epoch']} step {row['step']} total {row['total']:.4f}")

    train(model, train_samples, cfg, log_path=out / LOSS_CSV, progress=progress)
    save_model(model, out / CHECKPOINT_NAME)
    return model


def cmd_gradcheck(scope: str = "all", seed: int = 0, out: Optional[str] = None, n_seeds: int = 20) -> int:
    lines = []

    def report(line: str) -> None:
        lines.append(line)
        _log(line)

    try:
        results = gradcheck.run_all(scope, n_seeds=n_seeds, base_seed=seed, report=report)
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    failed = [r.op for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} gradient checks passed"
    if failed:
        summary += "; failed: " + ", ".join(failed)
    report(summary)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    train_samples, _ = datasets(cfg)
    _log(f"training on {len(train_samples)} images for {cfg.optim.epochs} epochs -> {out}")
    train_run(cfg, out, train_samples)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint_path: str, split: str = "test") -> int:
    out = _out_dir(cfg)
    model = load_model(cfg, checkpoint_path)
    train_samples, test_samples = datasets(cfg)
    samples = test_samples if split == "test" else train_samples
    report = evaluate(model, samples)
    (out / "eval.json").write_text(report.to_json() + "\n")
    (out / "eval_table.csv").write_text(report.table_csv("DANet" if cfg.toggles.focal else "model"))
    _log(f"{split}: mAP@[.5:.95] {report.map:.4f}  mAP@0.5 {report.map50:.4f}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, checkpoint_path: str, image_path: str) -> int:
    out = _out_dir(cfg)
    model = load_model(cfg, checkpoint_path)
    image = load_image(image_path)
    if image.shape[0] != cfg.backbone.in_channels:
        raise DataError(f"image has {image.shape[0]} channels, model expects {cfg.backbone.in_channels}")
    dets = infer(model, [image])[0]
    payload = [
        {"label": cfg.classes[d.label], "score": d.score, "box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2]}
        for d in dets
    ]
    (out / "detections.json").write_text(json.dumps({"image": str(image_path), "detections": payload}, indent=2) + "\n")
    _log(f"{len(payload)} detections")
    return EXIT_OK


def phase_config(base: RunConfig, name: str, toggles: Toggles) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.toggles = copy.deepcopy(toggles)
    cfg.output_dir = str(Path(base.output_dir) / name)
    return cfg


def run_ablation(base: RunConfig) -> list:
    """Train and evaluate each phase in turn; returns ``(name, EvalReport)`` pairs."""
    train_samples, test_samples = datasets(base)
    rows = []
    for name, toggles in PHASES:
        cfg = phase_config(base, name, toggles)
        _log(f"ablation {name}: {toggles}")
        model = train_run(cfg, _out_dir(cfg), train_samples, quiet=True)
        report = evaluate(model, test_samples)
        (Path(cfg.output_dir) / "eval.json").write_text(report.to_json() + "\n")
        rows.append((name, report))
        _log(f"  mAP@0.5 {report.map50:.4f}")
    return rows


def cmd_ablation(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rows = run_ablation(cfg)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["Method", *cfg.classes, "mAP"])
        for name, report in rows:
            writer.writerow(table_row(name, report, at50=True))
    with open(out / "ablation_coco.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["Method", *cfg.classes, "mAP"])
        for name, report in rows:
            writer.writerow(table_row(name, report, at50=False))
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    train_samples, test_samples = datasets(cfg)
    write_dataset(train_samples + test_samples, out / "images", out / "annotations")
    manifest = DatasetManifest(
        list(cfg.classes),
        [s.annotation.image_id for s in train_samples],
        [s.annotation.image_id for s in test_samples],
    )
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    _log(f"wrote {len(train_samples)} train / {len(test_samples)} test images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="danet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run configuration (default: toy synthetic settings)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", default="all", help=f"all or one of: {', '.join(gradcheck.SCOPES)}")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=int, default=20, help="seeds per op")
    g.add_argument("--out")
    common(sub.add_parser("train", help="train a detector"))
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    i = sub.add_parser("infer", help="detect objects in one PGM/PPM image")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    common(sub.add_parser("ablation", help="train and evaluate the five-phase lattice"))
    common(sub.add_parser("gen-data", help="write the synthetic dataset as PGM + VOC XML"))
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "gradcheck":
        return cmd_gradcheck(args.scope, args.seed, args.out, args.seeds)
    cfg = resolve_config(args.config, args.seed, args.out)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.split)
    if args.command == "infer":
        return cmd_infer(cfg, args.checkpoint, args.image)
    if args.command == "ablation":
        return cmd_ablation(cfg)
    return cmd_gen_data(cfg)


def thread_limit() -> Optional[int]:
    raw = os.environ.get("DANET_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DANET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DANET_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    from threadpoolctl import threadpool_limits

    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=thread_limit()):
            return _dispatch(args)
    except (ConfigError, DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
