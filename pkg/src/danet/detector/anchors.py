"""Anchor tiling and IoU-based label assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .boxes import iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class AnchorConfig:
    sizes: tuple = (32, 64, 128, 256)  # one base size per pyramid level, P2..P5
    ratios: tuple = (0.5, 1.0, 2.0)  # height / width

    @property
    def per_location(self) -> int:
        return len(self.ratios)


@dataclass(frozen=True)
class MatchThresholds:
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    head_positive_iou: float = 0.5

    def __post_init__(self) -> None:
        if not self.negative_iou < self.positive_iou:
            raise ValueError("negative_iou must be below positive_iou")


def cell_anchors(sizes: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Zero-centred templates ``[len(sizes) * len(ratios), 4]`` of equal area per size."""
    out = []
    for size in sizes:
        for r in ratios:
            w = size / np.sqrt(r)
            h = size * np.sqrt(r)
            out.append([-w / 2, -h / 2, w / 2, h / 2])
    return np.asarray(out, dtype=np.float64)


def level_anchors(height: int, width: int, stride: int, templates: np.ndarray) -> np.ndarray:
    """Anchors ordered (row, col, template), centred at ``(i + 0.5) * stride``."""
    cy = (np.arange(height) + 0.5) * stride
    cx = (np.arange(width) + 0.5) * stride
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    shifts = np.stack([xx, yy, xx, yy], axis=-1).reshape(-1, 1, 4)
    return (shifts + templates[None]).reshape(-1, 4)


def generate_anchors(
    level_shapes: Mapping[int, tuple[int, int]],
    strides: Mapping[int, int],
    cfg: AnchorConfig = AnchorConfig(),
) -> dict:
    """Anchors per pyramid level, keyed like ``level_shapes``.

    Level ``k`` of a full pyramid uses ``cfg.sizes[k - 2]``.  A lone level
    (the single-map detector) carries every size at every location.
    """
    levels = sorted(level_shapes)
    out = {}
    for level in levels:
        h, w = level_shapes[level]
        if len(levels) == 1:
            sizes = cfg.sizes
        else:
            sizes = (cfg.sizes[level - levels[0]],)
        out[level] = level_anchors(h, w, strides[level], cell_anchors(sizes, cfg.ratios))
    return out


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    positive_iou: float = 0.7,
    negative_iou: float = 0.3,
    force_best: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Label each anchor positive (1), negative (0) or ignored (-1).

    IoU >= ``positive_iou`` -> positive, IoU <= ``negative_iou`` -> negative,
    otherwise ignored.  With ``force_best``, each ground truth's best
    anchor(s) are made positive and matched to it.  Returns the labels and
    the index of the matched ground truth (-1 when there is none).
    """
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return labels, matched
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou <= negative_iou] = NEGATIVE
    pos = best_iou >= positive_iou
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    if force_best:
        gt_best = ious.max(axis=0)
        for g in range(len(gt_boxes)):
            if gt_best[g] <= 0:
                continue
            hits = np.nonzero(ious[:, g] == gt_best[g])[0]
            labels[hits] = POSITIVE
            matched[hits] = g
    return labels, matched
