"""Training loop, batched inference and dataset evaluation for :class:`Detector`."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .. import checkpoint, metrics
from ..config import RunConfig
from ..data import Sample, flip_sample
from ..optim import SgdState, sgd_step, step_lr
from ..tensor import Tensor
from .model import Detection, Detector, Targets

LOSS_COLUMNS = ("epoch", "step", "total", "rpn_cls", "rpn_box", "head_cls", "head_box")
WARMUP_START = 0.001


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)  # one dict per step, keyed by LOSS_COLUMNS
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def epoch_means(self, name: str = "total") -> np.ndarray:
        epochs = sorted({r["epoch"] for r in self.rows})
        return np.array([np.mean([r[name] for r in self.rows if r["epoch"] == e]) for e in epochs])


def stack_images(samples: Sequence[Sample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]).astype(np.float32))


def targets_for(samples: Sequence[Sample], classes: Sequence[str]) -> list:
    return [Targets(s.annotation.boxes(), s.annotation.labels(classes)) for s in samples]


def learning_rate(cfg: RunConfig, epoch: int, step: int) -> float:
    """Step decay by epoch, with an optional linear warm-up over the first steps."""
    o = cfg.optim
    lr = step_lr(o.lr, epoch, o.milestones, o.lr_factor)
    if step < o.warmup_steps:
        frac = step / o.warmup_steps
        lr *= WARMUP_START + (1 - WARMUP_START) * frac
    return lr


def _check_finite(named: dict, what: str) -> None:
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else value
        if arr is not None and not np.all(np.isfinite(arr)):
            raise TrainingError(f"non-finite {what} in {name!r}; aborting")


def train(
    model: Detector,
    samples: Sequence[Sample],
    cfg: Optional[RunConfig] = None,
    log_path: Union[str, Path, None] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Minibatch SGD over ``samples``; the batch order is drawn from the config seed."""
    cfg = cfg or model.config
    if not samples:
        raise TrainingError("training set is empty")
    o = cfg.optim
    rng = np.random.default_rng(cfg.seed + 2)
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    state = SgdState(o.lr, o.momentum, o.weight_decay)
    result = TrainResult()
    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        writer = csv.writer(log, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(o.epochs):
            order = rng.permutation(len(samples))
            flips = rng.random(len(samples)) < 0.5
            for b in range(0, len(order), o.batch_size):
                idx = order[b : b + o.batch_size]
                batch = [flip_sample(samples[i]) if cfg.data.flip and flips[i] else samples[i] for i in idx]
                state.lr = learning_rate(cfg, epoch, step)
                model.zero_grad()
                losses = model.loss(stack_images(batch), targets_for(batch, cfg.classes))
                _check_finite(losses, "loss")
                losses["total"].backward()
                _check_finite({n: p.grad for n, p in zip(names, params)}, "gradient")
                if o.clip_grad_norm:
                    _clip_gradients(params, o.clip_grad_norm)
                sgd_step(params, state)
                row = {"epoch": epoch, "step": step}
                row.update({k: float(losses[k].data) for k in LOSS_COLUMNS[2:]})
                result.rows.append(row)
                if log is not None:
                    writer.writerow([epoch, step] + [repr(row[k]) for k in LOSS_COLUMNS[2:]])
                if progress is not None:
                    progress(row)
                step += 1
    finally:
        if log is not None:
            log.close()
    result.seconds = time.perf_counter() - start
    return result


def _clip_gradients(params: Sequence[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)


def save_model(model: Detector, path: Union[str, Path]) -> None:
    checkpoint.save(path, model.state_dict())


def load_model(cfg: RunConfig, path: Union[str, Path]) -> Detector:
    model = Detector(cfg)
    try:
        model.load_state_dict(checkpoint.load(path))
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{path}: does not fit this config ({exc})") from None
    return model


def infer(
    model: Detector,
    images: Sequence[np.ndarray],
    score_thr: Optional[float] = None,
    nms_thr: Optional[float] = None,
    max_dets: Optional[int] = None,
    batch_size: int = 8,
) -> list:
    """Detections per image (lists of :class:`Detection`, best first)."""
    e = model.config.eval
    score_thr = e.score_threshold if score_thr is None else score_thr
    nms_thr = e.nms_threshold if nms_thr is None else nms_thr
    max_dets = e.max_detections if max_dets is None else max_dets
    out = []
    for b in range(0, len(images), batch_size):
        batch = Tensor(np.stack(images[b : b + batch_size]).astype(np.float32))
        out.extend(model.detect(batch, score_thr, nms_thr, max_dets))
    return out


def detections_to_arrays(dets: Sequence[Detection]) -> "metrics.ImageDetections":
    if not dets:
        return metrics.ImageDetections(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))
    return metrics.ImageDetections(
        np.stack([d.box.as_array() for d in dets]),
        np.array([d.label for d in dets], dtype=np.int64),
        np.array([d.score for d in dets], dtype=np.float64),
    )


def evaluate(model: Detector, samples: Sequence[Sample]) -> "metrics.EvalReport":
    classes = model.config.classes
    dets = infer(model, [s.image for s in samples])
    gts = [metrics.ImageGroundTruth(s.annotation.boxes(), s.annotation.labels(classes)) for s in samples]
    return metrics.coco_map([detections_to_arrays(d) for d in dets], gts, classes)
