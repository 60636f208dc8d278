"""Quantisation-free RoI feature extraction.

Each RoI is mapped to feature coordinates by ``spatial_scale`` (no
rounding), split into ``out_h x out_w`` equal bins, and every bin is
sampled at ``sampling_ratio**2`` regularly spaced sub-cell centres by
bilinear interpolation.  Samples are then averaged (or max-pooled) per bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .ops import bilinear_operator
from .tensor import Function, Tensor, concat


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    label: Optional[int] = None

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: need x1 < x2 and y1 < y2, got {coords}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class RoiAlignConfig:
    out_h: int = 7
    out_w: int = 7
    sampling_ratio: int = 2
    pool_mode: str = "avg"
    spatial_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError("RoI Align output size must be positive")
        if self.sampling_ratio < 1:
            raise ValueError("sampling_ratio must be >= 1")
        if self.pool_mode not in ("avg", "max"):
            raise ValueError(f"pool_mode must be 'avg' or 'max', got {self.pool_mode!r}")
        if not self.spatial_scale > 0:
            raise ValueError("spatial_scale must be positive")


def sample_points(rois: np.ndarray, cfg: RoiAlignConfig) -> tuple[np.ndarray, np.ndarray]:
    """Sample coordinates ``[R, out_h, out_w, s, s]`` in feature space (rows, cols)."""
    s = cfg.sampling_ratio
    x1 = rois[:, 0] * cfg.spatial_scale
    y1 = rois[:, 1] * cfg.spatial_scale
    bin_w = (rois[:, 2] - rois[:, 0]) * cfg.spatial_scale / cfg.out_w
    bin_h = (rois[:, 3] - rois[:, 1]) * cfg.spatial_scale / cfg.out_h
    sub = (np.arange(s) + 0.5) / s
    fy = np.arange(cfg.out_h)[:, None] + sub[None, :]  # [out_h, s]
    fx = np.arange(cfg.out_w)[:, None] + sub[None, :]  # [out_w, s]
    ys = y1[:, None, None] + bin_h[:, None, None] * fy[None]
    xs = x1[:, None, None] + bin_w[:, None, None] * fx[None]
    shape = (len(rois), cfg.out_h, cfg.out_w, s, s)
    ys = np.broadcast_to(ys[:, :, None, :, None], shape)
    xs = np.broadcast_to(xs[:, None, :, None, :], shape)
    return ys, xs


class RoiAlignFn(Function):
    def forward(self, feature, rois, batch_index, cfg):
        n, c, h, w = feature.shape
        r = len(rois)
        ys, xs = sample_points(rois, cfg)
        per_bin = cfg.sampling_ratio**2
        col_off = np.broadcast_to((batch_index * h * w).reshape(-1, 1, 1, 1, 1), ys.shape)
        op = bilinear_operator(ys, xs, h, w, column_offset=col_off, n_cols=n * h * w, dtype=feature.dtype)
        flat = feature.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        vals = np.asarray(op @ flat).reshape(r, cfg.out_h, cfg.out_w, per_bin, c)
        if cfg.pool_mode == "avg":
            out = vals.mean(axis=3)
            arg = None
        else:
            arg = vals.argmax(axis=3)
            out = np.take_along_axis(vals, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        self.save(op, feature.shape, cfg, arg, r)
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        op, shape, cfg, arg, r = self.saved
        n, c, h, w = shape
        per_bin = cfg.sampling_ratio**2
        g = grad.transpose(0, 2, 3, 1)  # [R, oh, ow, C]
        if cfg.pool_mode == "avg":
            gp = np.broadcast_to((g / per_bin)[:, :, :, None, :], (r, cfg.out_h, cfg.out_w, per_bin, c))
        else:
            gp = np.zeros((r, cfg.out_h, cfg.out_w, per_bin, c), dtype=grad.dtype)
            np.put_along_axis(gp, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dflat = np.asarray(op.T @ gp.reshape(-1, c))
        return dflat.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def _validate_rois(rois: np.ndarray) -> None:
    if rois.ndim != 2 or rois.shape[1] != 4:
        raise ValueError(f"rois must be [R, 4], got {rois.shape}")
    if not np.all(np.isfinite(rois)):
        raise ValueError("roi coordinates must be finite")
    bad = (rois[:, 0] >= rois[:, 2]) | (rois[:, 1] >= rois[:, 3])
    if np.any(bad):
        raise ValueError(f"degenerate roi (x1 >= x2 or y1 >= y2): {rois[np.argmax(bad)]}")


def roi_align_batch(
    feature: Tensor,
    rois: np.ndarray,
    cfg: RoiAlignConfig,
    batch_index: Optional[np.ndarray] = None,
) -> Tensor:
    """Align ``rois`` ``[R, 4]`` against a ``[N, C, H, W]`` feature batch -> ``[R, C, oh, ow]``."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    _validate_rois(rois)
    if feature.ndim == 3:
        feature = feature.reshape((1,) + feature.shape)
    if batch_index is None:
        batch_index = np.zeros(len(rois), dtype=np.int64)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    return RoiAlignFn.apply(feature, rois=rois, batch_index=batch_index, cfg=cfg)


def roi_align(feature: Tensor, roi: Box, cfg: RoiAlignConfig = RoiAlignConfig()) -> Tensor:
    """Align a single :class:`Box` against ``[C, H, W]`` -> ``[C, out_h, out_w]``."""
    if feature.ndim != 3:
        raise ValueError(f"roi_align expects [C,H,W], got {feature.shape}")
    out = roi_align_batch(feature, roi.as_array()[None], cfg)
    return out.reshape(out.shape[1:])


def roi_align_backward(feature: np.ndarray, roi: Box, cfg: RoiAlignConfig, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * roi_align(feature, roi, cfg))`` w.r.t. ``feature``."""
    ft = Tensor(feature, requires_grad=True)
    roi_align(ft, roi, cfg).backward(upstream)
    return ft.grad


def assign_roi_level(
    roi: Any,
    min_level: int = 2,
    max_level: int = 5,
    canonical_size: float = 224.0,
    canonical_level: int = 4,
) -> Any:
    """Pyramid level ``floor(4 + log2(sqrt(area) / 224))`` clamped to [2, 5].

    Accepts one :class:`Box` (returns an int) or an ``[R, 4]`` array.
    """
    if isinstance(roi, Box):
        return int(assign_roi_level(roi.as_array()[None], min_level, max_level, canonical_size, canonical_level)[0])
    rois = np.asarray(roi, dtype=np.float64).reshape(-1, 4)
    side = np.sqrt(np.maximum((rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1]), 1e-12))
    level = np.floor(canonical_level + np.log2(side / canonical_size) + 1e-9)
    return np.clip(level, min_level, max_level).astype(np.int64)


def multilevel_roi_align(
    levels: Mapping[int, Tensor],
    strides: Mapping[int, int],
    rois: np.ndarray,
    batch_index: np.ndarray,
    out_size: int = 7,
    sampling_ratio: int = 2,
    pool_mode: str = "avg",
) -> Tensor:
    """Route each RoI to its pyramid level and align there; output keeps input order."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    available = sorted(levels)
    if len(available) == 1:
        assigned = np.full(len(rois), available[0])
    else:
        assigned = assign_roi_level(rois, available[0], available[-1])
    parts = []
    order = []
    for level in available:
        idx = np.nonzero(assigned == level)[0]
        if idx.size == 0:
            continue
        cfg = RoiAlignConfig(out_size, out_size, sampling_ratio, pool_mode, 1.0 / strides[level])
        parts.append(roi_align_batch(levels[level], rois[idx], cfg, batch_index[idx]))
        order.append(idx)
    if not parts:
        c = levels[available[0]].shape[1]
        return Tensor(np.zeros((0, c, out_size, out_size), dtype=levels[available[0]].dtype))
    merged = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return merged[inverse]
