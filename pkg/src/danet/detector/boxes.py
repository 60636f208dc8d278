"""Box geometry on ``[N, 4]`` arrays of ``(x1, y1, x2, y2)``."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..roi_align import Box

# exp() cap for size deltas, as log(1000 / 16)
DELTA_CLAMP = math.log(1000.0 / 16)


def area(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU ``[len(a), len(b)]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    A box is dropped when its IoU with an already kept box exceeds the
    threshold.  Equal scores keep the lower original index first.  With
    ``max_keep`` the scan stops once that many boxes are kept.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    x1, y1, x2, y2 = (boxes[order, k] for k in range(4))
    areas = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    limit = len(order) if max_keep is None else max_keep
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        if len(keep) >= limit:
            break
        rest = pos + 1 + np.nonzero(alive[pos + 1 :])[0]
        if rest.size == 0:
            break
        iw = np.minimum(x2[pos], x2[rest]) - np.maximum(x1[pos], x1[rest])
        ih = np.minimum(y2[pos], y2[rest]) - np.maximum(y1[pos], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[pos] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        alive[rest[ov > iou_threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Box], iou_threshold: float) -> list:
    """:func:`nms` over :class:`Box` objects carrying scores."""
    if not dets:
        return []
    arr = np.stack([d.as_array() for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in nms(arr, scores, iou_threshold)]


def batched_nms(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold: float) -> np.ndarray:
    """NMS applied independently per label; result sorted by descending score."""
    keep = []
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        keep.extend(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size:
        keep = keep[np.lexsort((keep, -scores[keep]))]
    return keep


def encode(anchors: np.ndarray, targets: np.ndarray, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Regression targets ``(dx, dy, dw, dh)`` taking ``anchors`` to ``targets``."""
    wx, wy, ww, wh = weights
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return np.stack(
        [wx * (tx - ax) / aw, wy * (ty - ay) / ah, ww * np.log(tw / aw), wh * np.log(th / ah)],
        axis=1,
    )


def decode(anchors: np.ndarray, deltas: np.ndarray, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    wx, wy, ww, wh = weights
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, DELTA_CLAMP)
    dh = np.minimum(deltas[:, 3] / wh, DELTA_CLAMP)
    cx = ax + dx * aw
    cy = ay + dy * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def valid_mask(boxes: np.ndarray, min_size: float = 1e-3) -> np.ndarray:
    return ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
