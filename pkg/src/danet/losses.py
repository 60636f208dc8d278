"""Cross-entropy, focal loss and smooth-L1 box regression.

Scalar helpers take probabilities; the tensor losses take logits and fuse
the sigmoid so their gradients stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ops import _sigmoid
from .tensor import Function, Tensor, record_margin

EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"focal alpha must lie in (0, 1], got {self.alpha}")


CROSS_ENTROPY = FocalParams(gamma=0.0, alpha=1.0)


def _check_label(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary (0 or 1)")
    return y


def prob_true(p, y) -> np.ndarray:
    """``pt``: the probability assigned to the true class, clamped to [eps, 1 - eps]."""
    y = _check_label(y)
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    return np.where(y == 1, p, 1.0 - p)


def cross_entropy(p, y):
    """``-log(pt)``."""
    out = -np.log(prob_true(p, y))
    return float(out) if np.ndim(out) == 0 else out


def focal_loss(p, y, fp: FocalParams = FocalParams()):
    """``-alpha * (1 - pt)**gamma * log(pt)``."""
    pt = prob_true(p, y)
    out = -fp.alpha * (1.0 - pt) ** fp.gamma * np.log(pt)
    return float(out) if np.ndim(out) == 0 else out


def focal_loss_pt(pt, fp: FocalParams = FocalParams()):
    """Focal loss written directly in terms of ``pt`` (no clamping)."""
    pt = np.asarray(pt, dtype=np.float64)
    out = -fp.alpha * (1.0 - pt) ** fp.gamma * np.log(pt)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1(diff, beta: float = 1.0) -> np.ndarray:
    a = np.abs(diff)
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def box_regression_loss(pred_deltas, target_deltas, beta: float = 1.0) -> float:
    """Smooth-L1 summed over the four ``(dx, dy, dw, dh)`` coordinates."""
    pred = np.asarray(pred_deltas, dtype=np.float64)
    target = np.asarray(target_deltas, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"delta shapes differ: {pred.shape} vs {target.shape}")
    return float(np.sum(smooth_l1(pred - target, beta)))


class SigmoidFocalFn(Function):
    def forward(self, logits, targets, weights, gamma, alpha):
        y = targets
        p = _sigmoid(logits)
        pt = np.where(y == 1, p, 1.0 - p)
        clamped = (pt < EPS)
        pt_c = np.maximum(pt, EPS)
        log_pt = np.log(pt_c)
        mod = (1.0 - pt) ** gamma if gamma else np.ones_like(pt)
        loss = -alpha * mod * log_pt
        # d/dz with s = +1 for positives, -1 for negatives:
        # s * alpha * (1-pt)^gamma * (gamma * pt * log(pt) - (1 - pt))
        sign = np.where(y == 1, 1.0, -1.0)
        if gamma:
            dlog = gamma * pt * log_pt
        else:
            dlog = 0.0
        dz = sign * alpha * mod * (dlog - (1.0 - pt))
        dz = np.where(clamped, sign * alpha * mod * dlog, dz)
        if weights is not None:
            loss = loss * weights
            dz = dz * weights
        self.save(dz.astype(logits.dtype))
        return np.asarray(np.sum(loss), dtype=logits.dtype)

    def backward(self, grad):
        (dz,) = self.saved
        return grad * dz


def sigmoid_focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    fp: FocalParams = FocalParams(),
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Sum of per-element focal losses of ``sigmoid(logits)`` against binary targets.

    One-vs-all: each logit is an independent binary problem.  With
    ``FocalParams(0, 1)`` this is plain binary cross-entropy.  ``weights``
    scales (or masks out) individual elements.
    """
    targets = _check_label(targets)
    if targets.shape != logits.shape:
        raise ValueError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=logits.dtype), logits.shape)
    return SigmoidFocalFn.apply(logits, targets=targets, weights=weights, gamma=fp.gamma, alpha=fp.alpha)


class SmoothL1Fn(Function):
    def forward(self, pred, target, weights, beta):
        d = pred - target
        a = np.abs(d)
        quad = a < beta
        if a.size:
            record_margin(np.min(np.abs(a - beta)))
        loss = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
        grad = np.where(quad, d / beta, np.sign(d))
        if weights is not None:
            loss = loss * weights
            grad = grad * weights
        self.save(grad.astype(pred.dtype))
        return np.asarray(np.sum(loss), dtype=pred.dtype)

    def backward(self, grad):
        (g,) = self.saved
        return grad * g


def smooth_l1_loss(pred: Tensor, target: np.ndarray, weights: Optional[np.ndarray] = None, beta: float = 1.0) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.shape}")
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=pred.dtype), pred.shape)
    return SmoothL1Fn.apply(pred, target=target, weights=weights, beta=beta)
