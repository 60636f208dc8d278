"""Precision/recall, greedy detection matching and COCO-style average precision."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .detector.boxes import iou_matrix

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("match counts must be non-negative")

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def precision_recall(c: MatchCounts) -> tuple[float, float]:
    """``P = TP / (TP + FP)``, ``R = TP / (TP + FN)``, with 0/0 taken as 0."""
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return p, r


def match_detections(
    det_boxes: np.ndarray,
    det_labels: Sequence[int],
    gt_boxes: np.ndarray,
    gt_labels: Sequence[int],
    iou_thr: float,
) -> tuple[MatchCounts, np.ndarray]:
    """Greedy score-order matching for one image.

    Detections must already be sorted by descending score.  Each detection
    takes the unmatched same-class ground truth with the highest IoU; it is
    a true positive if that IoU reaches ``iou_thr``.  Returns the counts and
    a boolean TP flag per detection.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    det_labels = np.asarray(det_labels)
    gt_labels = np.asarray(gt_labels)
    flags = np.zeros(len(det_boxes), dtype=bool)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    if len(det_boxes) and len(gt_boxes):
        ious = iou_matrix(det_boxes, gt_boxes)
        for d in range(len(det_boxes)):
            cand = (~taken) & (gt_labels == det_labels[d])
            if not cand.any():
                continue
            row = np.where(cand, ious[d], -1.0)
            g = int(np.argmax(row))
            if row[g] >= iou_thr:
                flags[d] = True
                taken[g] = True
    tp = int(flags.sum())
    return MatchCounts(tp=tp, fp=len(det_boxes) - tp, fn=len(gt_boxes) - tp), flags


def average_precision(flags: Sequence[bool], n_gt: int) -> Optional[float]:
    """101-point interpolated AP for TP/FP flags ranked by descending score.

    Precision at recall ``r`` is the best precision at any recall ``>= r``.
    Returns ``None`` when the class has neither ground truth nor detections
    (it is then left out of class means).
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    # recall >= k/100  <=>  100 * tp >= k * n_gt (exact in integers)
    for k in range(RECALL_POINTS):
        reached = np.nonzero(100 * tp >= k * n_gt)[0]
        if reached.size:
            total += envelope[reached[0]]
    return float(total / RECALL_POINTS)


@dataclass
class ImageDetections:
    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray


@dataclass
class ImageGroundTruth:
    boxes: np.ndarray
    labels: np.ndarray


@dataclass
class EvalReport:
    classes: list
    iou_thresholds: tuple
    ap: dict  # class -> AP averaged over iou_thresholds
    ap50: dict  # class -> AP at IoU 0.5
    map: float
    map50: float
    counts: dict = field(default_factory=dict)  # (class, thr) -> MatchCounts
    ap_per_threshold: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "classes": self.classes,
            "iou_thresholds": list(self.iou_thresholds),
            "ap": self.ap,
            "ap50": self.ap50,
            "mAP": self.map,
            "mAP50": self.map50,
            "counts": {
                f"{cls}@{thr:.2f}": {"tp": c.tp, "fp": c.fp, "fn": c.fn}
                for (cls, thr), c in self.counts.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=False)

    def table_csv(self, method: str = "model", at50: bool = True) -> str:
        """One-row table: method, one AP column per class, then mAP (percent)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["Method", *self.classes, "mAP"])
        writer.writerow(table_row(method, self, at50))
        return buf.getvalue()


def table_row(method: str, report: EvalReport, at50: bool = True) -> list:
    src = report.ap50 if at50 else report.ap
    overall = report.map50 if at50 else report.map
    cells = [method]
    for cls in report.classes:
        v = src.get(cls)
        cells.append("" if v is None else f"{100 * v:.2f}")
    cells.append(f"{100 * overall:.2f}")
    return cells


def _class_mean(values: dict) -> float:
    present = [v for v in values.values() if v is not None]
    return float(np.mean(present)) if present else 0.0


def coco_map(
    detections: Sequence[ImageDetections],
    ground_truth: Sequence[ImageGroundTruth],
    classes: Sequence[str],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> EvalReport:
    """Per-class AP averaged over IoU thresholds, plus the AP@0.5 table.

    Detections of each class are ranked by score across all images (stable
    in image order for ties); matching is greedy within each image.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same images")
    thresholds = tuple(iou_thresholds)
    ap_thr: dict = {}
    counts: dict = {}
    for ci, cls in enumerate(classes):
        for thr in thresholds:
            scores, flags = [], []
            total = MatchCounts()
            n_gt = 0
            for dets, gts in zip(detections, ground_truth):
                dm = np.asarray(dets.labels) == ci
                gm = np.asarray(gts.labels) == ci
                n_gt += int(gm.sum())
                d_boxes = np.asarray(dets.boxes, dtype=np.float64).reshape(-1, 4)[dm]
                d_scores = np.asarray(dets.scores, dtype=np.float64)[dm]
                order = np.argsort(-d_scores, kind="stable")
                c, f = match_detections(
                    d_boxes[order], np.full(len(order), ci),
                    np.asarray(gts.boxes, dtype=np.float64).reshape(-1, 4)[gm], np.full(int(gm.sum()), ci),
                    thr,
                )
                total = total + c
                scores.append(d_scores[order])
                flags.append(f)
            all_scores = np.concatenate(scores) if scores else np.zeros(0)
            all_flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
            rank = np.argsort(-all_scores, kind="stable")
            ap_thr[(cls, thr)] = average_precision(all_flags[rank], n_gt)
            counts[(cls, thr)] = total
    ap = {}
    ap50 = {}
    for cls in classes:
        vals = [ap_thr[(cls, t)] for t in thresholds]
        ap[cls] = None if vals[0] is None else float(np.mean(vals))
        ap50[cls] = ap_thr.get((cls, 0.5)) if 0.5 in thresholds else None
    return EvalReport(
        classes=list(classes),
        iou_thresholds=thresholds,
        ap=ap,
        ap50=ap50,
        map=_class_mean(ap),
        map50=_class_mean(ap50),
        counts=counts,
        ap_per_threshold=ap_thr,
    )
