"""Two-stage detector: residual backbone, optional FPN, RPN and RoI-Align head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .. import ops
from ..cbam import CbamWeights, cbam_apply
from ..config import RunConfig
from ..deform import DeformConv2d
from ..fpn import STRIDES, FpnWeights, PyramidFeatures, fpn_build
from ..losses import CROSS_ENTROPY, FocalParams, sigmoid_focal_loss, smooth_l1_loss
from ..nn import ConvWeights, Linear, Module
from ..roi_align import Box, multilevel_roi_align
from ..tensor import Tensor, concat, no_grad
from . import boxes as bx
from .anchors import AnchorConfig, assign_targets, generate_anchors

HEAD_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
PRIOR_PROB = 0.01
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class Detection:
    box: Box
    label: int
    score: float


class BasicBlock(Module):
    """conv3x3 -> relu -> conv3x3 (optionally deformable) -> CBAM -> + shortcut -> relu."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int, deform: bool, cbam: bool, cbam_r: int, cbam_bias: bool):
        self.conv1 = ConvWeights.init(rng, in_ch, out_ch, 3, stride)
        # residual branch starts silent so each block begins as its shortcut
        conv2 = ConvWeights.init(rng, out_ch, out_ch, 3, 1, std=0.0)
        self.conv2 = DeformConv2d(conv2) if deform else conv2
        if cbam:
            self.cbam = CbamWeights.init(rng, out_ch, cbam_r, cbam_bias)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = ConvWeights.init(rng, in_ch, out_ch, 1, stride, padding=0, std=1.0 / math.sqrt(in_ch))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.relu(self.conv1(x))
        y = self.conv2(y)
        if hasattr(self, "cbam"):
            y = cbam_apply(y, self.cbam)
        short = self.shortcut(x) if hasattr(self, "shortcut") else x
        return ops.relu(y + short)


class Backbone(Module):
    """Stem (stride 2) plus residual stages giving C2..C5 at strides 4..32.

    Stages above ``top_level`` are not built.
    """

    def __init__(self, rng, cfg, use_cbam: bool, use_dcn: bool, top_level: int = 5):
        w = cfg.base_width
        self.stem = ConvWeights.init(rng, cfg.in_channels, w, 3, 2)
        widths = [w * 2**i for i in range(top_level - 1)]
        stages = []
        in_ch = w
        for s, out_ch in enumerate(widths, start=1):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                blocks.append(
                    BasicBlock(
                        rng, in_ch, out_ch, 2 if b == 0 else 1,
                        deform=use_dcn and s in cfg.deform_stages,
                        cbam=use_cbam, cbam_r=cfg.cbam_reduction, cbam_bias=cfg.cbam_mlp_bias,
                    )
                )
                in_ch = out_ch
            stages.append(_Stage(blocks))
        self.stages = stages
        self._widths = widths

    @property
    def out_channels(self) -> dict:
        return {i + 2: c for i, c in enumerate(self._widths)}

    def __call__(self, x: Tensor) -> dict:
        y = ops.relu(self.stem(x))
        out = {}
        for level, stage in zip(range(2, 6), self.stages):
            y = stage(y)
            out[level] = y
        return out


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class SingleLevelNeck(Module):
    """Without FPN: one 1x1 projection of C4 (stride 16) feeds both stages."""

    LEVEL = 4

    def __init__(self, rng, in_ch: int, out_ch: int):
        self.proj = ConvWeights.init(rng, in_ch, out_ch, 1, std=1.0 / math.sqrt(in_ch))

    def __call__(self, maps: dict) -> PyramidFeatures:
        return PyramidFeatures({self.LEVEL: self.proj(maps[self.LEVEL])}, {self.LEVEL: STRIDES[self.LEVEL]})


class FpnNeck(Module):
    def __init__(self, rng, in_channels: dict, out_ch: int):
        self.fpn = FpnWeights.init(rng, in_channels, out_ch)

    def __call__(self, maps: dict) -> PyramidFeatures:
        return fpn_build(maps, self.fpn)


class RpnHead(Module):
    """Shared 3x3 conv + relu, then sibling 1x1 convs for objectness and deltas."""

    def __init__(self, rng, in_ch: int, mid_ch: int, anchors_per_loc: int, prior: Optional[float]):
        self.conv = ConvWeights.init(rng, in_ch, mid_ch, 3, std=0.01)
        self.cls = ConvWeights.init(rng, mid_ch, anchors_per_loc, 1, std=0.01)
        self.box = ConvWeights.init(rng, mid_ch, 4 * anchors_per_loc, 1, std=0.01)
        if prior is not None:
            self.cls.bias.data[:] = -math.log((1 - prior) / prior)
        self._a = anchors_per_loc

    def __call__(self, pyramid: PyramidFeatures) -> tuple[Tensor, Tensor]:
        """Logits ``[N, A_total]`` and deltas ``[N, A_total, 4]``, ordered (level, row, col, anchor)."""
        logits, deltas = [], []
        for _, feat in pyramid.items():
            t = ops.relu(self.conv(feat))
            n, _, h, w = t.shape
            logits.append(self.cls(t).transpose(0, 2, 3, 1).reshape(n, h * w * self._a))
            d = self.box(t).reshape(n, self._a, 4, h, w).transpose(0, 3, 4, 1, 2)
            deltas.append(d.reshape(n, h * w * self._a, 4))
        if len(logits) == 1:
            return logits[0], deltas[0]
        return concat(logits, axis=1), concat(deltas, axis=1)


def rpn_forward(pyramid: PyramidFeatures, head: RpnHead) -> tuple[Tensor, Tensor]:
    """Objectness probabilities and box deltas for every anchor."""
    logits, deltas = head(pyramid)
    return ops.sigmoid(logits), deltas


class RoiHead(Module):
    def __init__(self, rng, in_ch: int, roi_size: int, hidden: int, num_classes: int, prior: Optional[float]):
        self.fc1 = Linear.init(rng, in_ch * roi_size * roi_size, hidden)
        self.fc2 = Linear.init(rng, hidden, hidden)
        self.cls = Linear.init(rng, hidden, num_classes, std=0.01)
        self.box = Linear.init(rng, hidden, 4, std=0.001)
        if prior is not None:
            self.cls.bias.data[:] = -math.log((1 - prior) / prior)

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        x = feats.reshape(feats.shape[0], -1)
        x = self.fc1(x, "relu")
        x = self.fc2(x, "relu")
        return self.cls(x), self.box(x)


@dataclass
class Targets:
    boxes: np.ndarray  # [M, 4]
    labels: np.ndarray  # [M] class indices


class Detector(Module):
    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        t = cfg.toggles
        h = cfg.head
        self._cfg = cfg
        top = 5 if t.fpn else SingleLevelNeck.LEVEL
        self.backbone = Backbone(rng, cfg.backbone, t.cbam, t.dcn, top)
        if t.fpn:
            self.neck = FpnNeck(rng, self.backbone.out_channels, h.fpn_channels)
        else:
            self.neck = SingleLevelNeck(rng, self.backbone.out_channels[4], h.fpn_channels)
        self._anchor_cfg = AnchorConfig(tuple(cfg.anchors.sizes), tuple(cfg.anchors.ratios))
        per_loc = len(cfg.anchors.ratios) * (1 if t.fpn else len(cfg.anchors.sizes))
        prior = PRIOR_PROB if t.focal else None
        self.rpn = RpnHead(rng, h.fpn_channels, h.rpn_channels, per_loc, prior)
        self.roi_head = RoiHead(rng, h.fpn_channels, h.roi_size, h.hidden, len(cfg.classes), prior)
        self._focal = FocalParams(h.focal_gamma, h.focal_alpha) if t.focal else CROSS_ENTROPY
        self._sample_rng = np.random.default_rng((cfg.seed if seed is None else seed) + 1)
        self._anchor_cache: dict = {}

    @property
    def config(self) -> RunConfig:
        return self._cfg

    # ------------------------------------------------------------------
    def features(self, images: Tensor) -> PyramidFeatures:
        x = (images - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        return self.neck(self.backbone(x))

    def anchors(self, pyramid: PyramidFeatures) -> np.ndarray:
        shapes = {k: tuple(pyramid[k].shape[-2:]) for k in pyramid}
        key = tuple(sorted(shapes.items()))
        if key not in self._anchor_cache:
            per_level = generate_anchors(shapes, pyramid.strides, self._anchor_cfg)
            self._anchor_cache[key] = np.concatenate([per_level[k] for k in sorted(per_level)])
        return self._anchor_cache[key]

    def level_sizes(self, pyramid: PyramidFeatures) -> list:
        a = self._anchor_cfg.per_location * (1 if len(pyramid) > 1 else len(self._anchor_cfg.sizes))
        return [pyramid[k].shape[-2] * pyramid[k].shape[-1] * a for k in pyramid]

    def proposals(self, pyramid: PyramidFeatures, logits: np.ndarray, deltas: np.ndarray, image_hw: tuple) -> list:
        """Per-image proposal boxes (clipped, NMS'd), ranked by objectness."""
        h = self._cfg.head
        anchors = self.anchors(pyramid)
        sizes = self.level_sizes(pyramid)
        bounds = np.cumsum([0] + sizes)
        out = []
        for i in range(logits.shape[0]):
            cand_boxes, cand_scores = [], []
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                s = logits[i, lo:hi]
                k = min(h.rpn_pre_nms, s.size)
                top = np.argsort(-s, kind="stable")[:k]
                boxes = bx.decode(anchors[lo:hi][top], deltas[i, lo:hi][top].astype(np.float64))
                cand_boxes.append(boxes)
                cand_scores.append(s[top])
            boxes = bx.clip(np.concatenate(cand_boxes), *image_hw)
            scores = np.concatenate(cand_scores).astype(np.float64)
            keep = bx.valid_mask(boxes, 1.0)
            boxes, scores = boxes[keep], scores[keep]
            keep = bx.nms(boxes, scores, h.rpn_nms, h.rpn_post_nms)
            out.append(boxes[keep])
        return out

    # ------------------------------------------------------------------
    def _rpn_losses(self, pyramid, logits: Tensor, deltas: Tensor, targets: list):
        h = self._cfg.head
        anchors = self.anchors(pyramid)
        n, a = logits.shape
        labels = np.full((n, a), -1, dtype=np.int64)
        box_t = np.zeros((n, a, 4))
        for i, tg in enumerate(targets):
            lab, matched = assign_targets(anchors, tg.boxes, h.rpn_positive_iou, h.rpn_negative_iou)
            if not self._cfg.toggles.focal:
                lab = _subsample(lab, h.rpn_batch, h.rpn_positive_fraction, self._sample_rng)
            labels[i] = lab
            pos = lab == 1
            if pos.any():
                box_t[i, pos] = bx.encode(anchors[pos], tg.boxes[matched[pos]])
        valid = labels >= 0
        pos = labels == 1
        n_pos = max(1, int(pos.sum()))
        cls_norm = n_pos if self._cfg.toggles.focal else max(1, int(valid.sum()))
        cls = sigmoid_focal_loss(logits, (labels == 1).astype(np.int64), self._focal, weights=valid) * (1.0 / cls_norm)
        box = smooth_l1_loss(deltas, box_t, weights=pos[..., None]) * (1.0 / n_pos)
        return cls, box

    def _sample_rois(self, proposals: list, targets: list):
        h = self._cfg.head
        rois, batch_idx, cls_t, box_t, fg = [], [], [], [], []
        k = len(self._cfg.classes)
        for i, (props, tg) in enumerate(zip(proposals, targets)):
            cand = np.concatenate([props, tg.boxes]) if len(tg.boxes) else props
            if len(tg.boxes):
                ious = bx.iou_matrix(cand, tg.boxes)
                best = ious.argmax(axis=1)
                best_iou = ious.max(axis=1)
            else:
                best = np.zeros(len(cand), dtype=np.int64)
                best_iou = np.zeros(len(cand))
            is_fg = best_iou >= h.head_positive_iou
            fg_idx = np.nonzero(is_fg)[0]
            bg_idx = np.nonzero(~is_fg)[0]
            n_fg = min(len(fg_idx), int(round(h.roi_batch * h.roi_positive_fraction)))
            fg_idx = self._sample_rng.permutation(fg_idx)[:n_fg]
            bg_idx = self._sample_rng.permutation(bg_idx)[: h.roi_batch - n_fg]
            sel = np.concatenate([fg_idx, bg_idx]).astype(np.int64)
            sel_fg = np.zeros(len(sel), dtype=bool)
            sel_fg[: len(fg_idx)] = True
            onehot = np.zeros((len(sel), k), dtype=np.int64)
            deltas = np.zeros((len(sel), 4))
            if len(fg_idx):
                gt_i = best[fg_idx]
                onehot[np.arange(len(fg_idx)), tg.labels[gt_i]] = 1
                deltas[: len(fg_idx)] = bx.encode(cand[fg_idx], tg.boxes[gt_i], HEAD_DELTA_WEIGHTS)
            rois.append(cand[sel])
            batch_idx.append(np.full(len(sel), i))
            cls_t.append(onehot)
            box_t.append(deltas)
            fg.append(sel_fg)
        return (
            np.concatenate(rois),
            np.concatenate(batch_idx).astype(np.int64),
            np.concatenate(cls_t),
            np.concatenate(box_t),
            np.concatenate(fg),
        )

    def loss(self, images: Tensor, targets: list) -> dict:
        """Forward a batch and return the four loss terms plus their weighted total."""
        hc = self._cfg.head
        pyramid = self.features(images)
        logits, deltas = self.rpn(pyramid)
        rpn_cls, rpn_box = self._rpn_losses(pyramid, logits, deltas, targets)
        props = self.proposals(pyramid, logits.data, deltas.data, images.shape[-2:])
        rois, bidx, cls_t, box_t, fg = self._sample_rois(props, targets)
        feats = multilevel_roi_align(pyramid.levels, pyramid.strides, rois, bidx, hc.roi_size, hc.sampling_ratio)
        cls_logits, box_deltas = self.roi_head(feats)
        n_fg = max(1, int(fg.sum()))
        cls_norm = n_fg if self._cfg.toggles.focal else max(1, len(rois))
        head_cls = sigmoid_focal_loss(cls_logits, cls_t, self._focal) * (1.0 / cls_norm)
        head_box = smooth_l1_loss(box_deltas, box_t, weights=fg[:, None]) * (1.0 / n_fg)
        total = (rpn_cls + head_cls) * hc.cls_weight + (rpn_box + head_box) * hc.box_weight
        return {
            "total": total,
            "rpn_cls": rpn_cls,
            "rpn_box": rpn_box,
            "head_cls": head_cls,
            "head_box": head_box,
        }

    # ------------------------------------------------------------------
    def detect(
        self,
        images: Tensor,
        score_thr: float = 0.05,
        nms_thr: float = 0.5,
        max_dets: int = 100,
    ) -> list:
        """Detections per image, sorted by descending score."""
        hc = self._cfg.head
        with no_grad():
            pyramid = self.features(images)
            logits, deltas = self.rpn(pyramid)
            props = self.proposals(pyramid, logits.data, deltas.data, images.shape[-2:])
            counts = [len(p) for p in props]
            rois = np.concatenate(props) if sum(counts) else np.zeros((0, 4))
            results = []
            if len(rois) == 0:
                return [[] for _ in props]
            bidx = np.concatenate([np.full(c, i) for i, c in enumerate(counts)]).astype(np.int64)
            feats = multilevel_roi_align(pyramid.levels, pyramid.strides, rois, bidx, hc.roi_size, hc.sampling_ratio)
            cls_logits, box_deltas = self.roi_head(feats)
            probs = ops._sigmoid(cls_logits.data.astype(np.float64))
            boxes = bx.clip(bx.decode(rois, box_deltas.data.astype(np.float64), HEAD_DELTA_WEIGHTS), *images.shape[-2:])
        start = 0
        for c in counts:
            p = probs[start : start + c]
            b = boxes[start : start + c]
            start += c
            rows, labels = np.nonzero(p > score_thr)
            if rows.size == 0:
                results.append([])
                continue
            cand = b[rows]
            scores = p[rows, labels]
            ok = bx.valid_mask(cand)
            cand, scores, labels = cand[ok], scores[ok], labels[ok]
            keep = bx.batched_nms(cand, scores, labels, nms_thr)[:max_dets]
            results.append(
                [
                    Detection(Box(*map(float, cand[j]), score=float(scores[j]), label=int(labels[j])), int(labels[j]), float(scores[j]))
                    for j in keep
                ]
            )
        return results


def _subsample(labels: np.ndarray, batch: int, pos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Keep at most ``batch`` labelled anchors with up to ``pos_fraction`` positives."""
    out = labels.copy()
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(batch * pos_fraction))
    if len(pos) > n_pos:
        out[rng.permutation(pos)[n_pos:]] = -1
    n_neg = min(len(neg), batch - n_pos)
    if len(neg) > n_neg:
        out[rng.permutation(neg)[n_neg:]] = -1
    return out
