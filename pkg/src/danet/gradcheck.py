"""Central finite-difference checks for every differentiable op.

Each registered check draws random float64 inputs from a seed, projects
the op's output onto a fixed random direction to get a scalar, and
compares the tape gradient of every input against
``(f(x + h) - f(x - h)) / 2h`` on a random subset of entries.

Piecewise ops report their distance to the nearest kink during the
forward pass.  Draws closer than ``KINK_FACTOR * h`` to a kink are
redrawn, since a central difference straddling a kink measures a mix of
the two one-sided slopes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .cbam import CbamWeights, cbam_apply
from .deform import DeformConv2d, deform_conv2d
from .fpn import FpnWeights, fpn_build
from .losses import FocalParams, sigmoid_focal_loss, smooth_l1_loss
from .nn import ConvWeights, Module
from .roi_align import RoiAlignConfig, roi_align_batch
from .tensor import Tensor, concat, kink_probe, no_grad

STEP = 1e-3
TOLERANCE = 1e-4
KINK_FACTOR = 10.0
MAX_ENTRIES = 16
MAX_REDRAWS = 200
# entries whose gradient is below this fraction of the tensor's largest are
# compared on an absolute footing, so near-zero derivatives don't divide by ~0
FLOOR = 1e-3


@dataclass
class GradCheckResult:
    op: str
    scope: str
    shapes: dict
    seeds: int
    redraws: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE

    def line(self) -> str:
        shapes = " ".join(f"{k}{list(v)}" for k, v in self.shapes.items())
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.scope}/{self.op} seeds={self.seeds} max_rel_err={self.max_rel_error:.3e} {shapes}"


@dataclass
class Check:
    op: str
    scope: str
    # rng -> (function of a dict of Tensors, dict of float64 input arrays)
    build: Callable[[np.random.Generator], tuple]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR * scale)
    denom = np.where(denom > 0, denom, 1.0)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[[dict], Tensor],
    arrays: dict,
    rng: np.random.Generator,
    step: float = STEP,
    max_entries: int = MAX_ENTRIES,
) -> tuple[float, float]:
    """Largest relative error over sampled entries, and the kink margin seen."""
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    with kink_probe() as margins:
        out = fn(tensors)
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()
    margin = min(margins) if margins else np.inf

    def value(name: str, flat_index: int, delta: float) -> float:
        probe = dict(arrays)
        arr = arrays[name].copy()
        arr.reshape(-1)[flat_index] += delta
        probe[name] = arr
        with no_grad():
            y = fn({k: Tensor(v) for k, v in probe.items()})
        return float(np.sum(y.data * proj))

    worst = 0.0
    for name, arr in arrays.items():
        grad = tensors[name].grad
        grad = np.zeros_like(arr) if grad is None else grad.reshape(arr.shape)
        n = arr.size
        picks = rng.choice(n, size=min(n, max_entries), replace=False)
        numeric = np.array([(value(name, i, step) - value(name, i, -step)) / (2 * step) for i in picks])
        analytic = grad.reshape(-1)[picks]
        scale = float(np.max(np.abs(grad))) if grad.size else 0.0
        worst = max(worst, float(np.max(relative_error(analytic, numeric, scale))))
    return worst, margin


def run_check(check: Check, seeds: Sequence[int], step: float = STEP) -> GradCheckResult:
    worst = 0.0
    redraws = 0
    shapes: dict = {}
    for seed in seeds:
        for attempt in range(MAX_REDRAWS):
            rng = np.random.default_rng([seed, attempt])
            fn, arrays = check.build(rng)
            err, margin = check_gradients(fn, arrays, rng, step)
            if margin >= KINK_FACTOR * step:
                break
            redraws += 1
        else:
            raise RuntimeError(f"{check.op}: no kink-free draw for seed {seed}")
        worst = max(worst, err)
        shapes = {k: v.shape for k, v in arrays.items()}
    return GradCheckResult(check.op, check.scope, shapes, len(seeds), redraws, worst)


# --- helpers for building inputs ----------------------------------------


def _away_from_integers(rng: np.random.Generator, shape: tuple, low: int, high: int) -> np.ndarray:
    """Reals with fractional part in [0.15, 0.85], keeping bilinear kinks out of reach."""
    return rng.integers(low, high, size=shape) + rng.uniform(0.15, 0.85, size=shape)


def _bind(module: Module, tensors: dict, prefix: str) -> Module:
    """Point a module's parameters at the tensors keyed ``prefix + dotted name``."""
    for key, value in tensors.items():
        if not key.startswith(prefix):
            continue
        owner = module
        parts = key[len(prefix) :].split(".")
        for p in parts[:-1]:
            owner = getattr(owner, p)
        setattr(owner, parts[-1], value)
    return module


def _module_arrays(module: Module, prefix: str) -> dict:
    return {prefix + n: p.data.astype(np.float64) for n, p in module.named_parameters()}


# --- checks -------------------------------------------------------------


def _conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    c, oc = rng.integers(1, 4, size=2)
    x = rng.standard_normal((2, c, 6, 7))
    w = rng.standard_normal((oc, c, 3, 3))
    b = rng.standard_normal(oc)
    return (lambda t: ops.conv2d(t["x"], t["w"], t["b"], stride, padding)), {"x": x, "w": w, "b": b}


def _pool2d(rng):
    mode = ("max", "avg")[int(rng.integers(0, 2))]
    x = rng.standard_normal((2, 3, 6, 6))
    return (lambda t: ops.pool2d(t["x"], mode, 2, 2)), {"x": x}


def _dense(rng):
    act = ("sigmoid", "relu", "leaky_relu", None)[int(rng.integers(0, 4))]
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    return (lambda t: ops.dense(t["x"], t["w"], t["b"], act)), {"x": x, "w": w, "b": b}


def _upsample(rng):
    h, w = rng.integers(2, 5, size=2)
    x = rng.standard_normal((3, h, w))
    oh, ow = int(h * 2), int(w * 2 + rng.integers(0, 2))
    return (lambda t: ops.bilinear_upsample(t["x"], oh, ow)), {"x": x}


def _bilinear_sample(rng):
    x = rng.standard_normal((3, 5, 6))
    xs = _away_from_integers(rng, (4,), -1, 6)
    ys = _away_from_integers(rng, (4,), -1, 5)
    return (lambda t: ops.bilinear_sample(t["f"], t["xs"], t["ys"])), {"f": x, "xs": xs, "ys": ys}


def _deform_conv2d(rng):
    stride = int(rng.integers(1, 3))
    c, oc = rng.integers(1, 4, size=2)
    x = rng.standard_normal((2, c, 6, 6))
    w = rng.standard_normal((oc, c, 3, 3))
    b = rng.standard_normal(oc)
    ho = ops.conv_output_size(6, 3, stride, 1)
    off = _away_from_integers(rng, (2, 18, ho, ho), -2, 2)
    fn = lambda t: deform_conv2d(t["x"], t["w"], t["offsets"], t["b"], stride, 1)
    return fn, {"x": x, "w": w, "b": b, "offsets": off}


def _deform_layer(rng):
    c, oc = 2, 3
    conv = ConvWeights(rng.standard_normal((oc, c, 3, 3)), rng.standard_normal(oc), 1, 1, np.float64)
    # small offset weights around a half-pixel bias keep sample points mid-cell
    off = ConvWeights(
        0.01 * rng.standard_normal((18, c, 3, 3)), rng.choice([-0.5, 0.5, 1.5], size=18), 1, 1, np.float64
    )
    layer = DeformConv2d(conv, off)
    x = rng.standard_normal((1, c, 5, 5))
    arrays = {"x": x, **_module_arrays(layer, "layer.")}
    return (lambda t: _bind(layer, t, "layer.")(t["x"])), arrays


def _cbam(rng):
    c = int(rng.choice([4, 8]))
    w = CbamWeights.init(rng, c, 4, mlp_bias=bool(rng.integers(0, 2)), dtype=np.float64)
    for _, p in w.named_parameters():
        p.data = rng.standard_normal(p.shape) * (0.3 if p.ndim == 4 else 1.0)
    f = rng.standard_normal((1, c, 5, 6))
    arrays = {"f": f, **_module_arrays(w, "cbam.")}
    return (lambda t: cbam_apply(t["f"], _bind(w, t, "cbam."))), arrays


def _fpn(rng):
    chans = {2: 2, 3: 3, 4: 4, 5: 5}
    weights = FpnWeights.init(rng, chans, out_channels=3, dtype=np.float64)
    sizes = {2: 8, 3: 4, 4: 2, 5: 1}
    arrays = {f"c{k}": rng.standard_normal((1, chans[k], sizes[k], sizes[k])) for k in chans}
    arrays.update(_module_arrays(weights, "fpn."))

    def fn(t):
        _bind(weights, t, "fpn.")
        pyr = fpn_build({k: t[f"c{k}"] for k in chans}, weights)
        return concat([pyr[k].reshape(-1) for k in pyr])

    return fn, arrays


def _roi_align(rng):
    sr = int(rng.integers(1, 3))
    cfg = RoiAlignConfig(3, 2, sr, "avg", spatial_scale=float(rng.choice([0.5, 1.0])))
    f = rng.standard_normal((2, 3, 7, 8))
    rois = []
    for _ in range(3):
        x1, y1 = rng.uniform(-1, 6, size=2)
        rois.append([x1, y1, x1 + rng.uniform(1, 8), y1 + rng.uniform(1, 8)])
    rois = np.asarray(rois)
    bidx = rng.integers(0, 2, size=3)
    return (lambda t: roi_align_batch(t["feature"], rois, cfg, bidx)), {"feature": f}


def _focal(rng):
    fp = FocalParams(float(rng.choice([0.0, 0.5, 2.0])), float(rng.uniform(0.1, 1.0)))
    z = rng.uniform(-4, 4, size=(5, 3))
    y = rng.integers(0, 2, size=(5, 3))
    w = rng.integers(0, 2, size=(5, 3))
    return (lambda t: sigmoid_focal_loss(t["logits"], y, fp, w)), {"logits": z}


def _smooth_l1(rng):
    pred = rng.standard_normal((6, 4)) * 2
    target = rng.standard_normal((6, 4))
    w = rng.integers(0, 2, size=(6, 1))
    return (lambda t: smooth_l1_loss(t["pred"], target, w)), {"pred": pred}


def _rpn_head(rng):
    from .detector.model import RpnHead
    from .fpn import PyramidFeatures

    head = RpnHead(rng, 3, 4, 2, prior=0.01).astype(np.float64)
    for _, p in head.named_parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    arrays = {"p2": rng.standard_normal((1, 3, 3, 3)), "p3": rng.standard_normal((1, 3, 2, 2))}
    arrays.update(_module_arrays(head, "rpn."))
    n_anchor = 2 * (9 + 4)
    labels = rng.integers(-1, 2, size=(1, n_anchor))
    box_t = rng.standard_normal((1, n_anchor, 4)) * 0.3
    fp = FocalParams(2.0, 0.25)

    def fn(t):
        _bind(head, t, "rpn.")
        logits, deltas = head(PyramidFeatures({2: t["p2"], 3: t["p3"]}, {2: 4, 3: 8}))
        cls = sigmoid_focal_loss(logits, (labels == 1).astype(np.int64), fp, labels >= 0)
        box = smooth_l1_loss(deltas, box_t, (labels == 1)[..., None])
        return cls + box

    return fn, arrays


def _roi_head(rng):
    from .detector.model import RoiHead

    head = RoiHead(rng, 2, 3, 5, 2, prior=0.01).astype(np.float64)
    for _, p in head.named_parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    arrays = {"feature": rng.standard_normal((1, 2, 8, 8))}
    arrays.update(_module_arrays(head, "head."))
    rois = np.array([[0.5, 0.7, 5.2, 6.1], [2.3, 1.1, 7.4, 4.6], [1.2, 2.2, 3.9, 7.3]])
    cfg = RoiAlignConfig(3, 3, 2)
    cls_t = rng.integers(0, 2, size=(3, 2))
    box_t = rng.standard_normal((3, 4)) * 0.3
    fp = FocalParams(2.0, 0.25)

    def fn(t):
        _bind(head, t, "head.")
        logits, deltas = head(roi_align_batch(t["feature"], rois, cfg))
        return sigmoid_focal_loss(logits, cls_t, fp) + smooth_l1_loss(deltas, box_t)

    return fn, arrays


CHECKS = [
    Check("conv2d", "tensor", _conv2d),
    Check("pool2d", "tensor", _pool2d),
    Check("dense", "tensor", _dense),
    Check("bilinear_upsample", "tensor", _upsample),
    Check("bilinear_sample", "tensor", _bilinear_sample),
    Check("deform_conv2d", "deform", _deform_conv2d),
    Check("deform_layer", "deform", _deform_layer),
    Check("cbam_apply", "cbam", _cbam),
    Check("fpn_build", "fpn", _fpn),
    Check("roi_align", "roi-align", _roi_align),
    Check("sigmoid_focal_loss", "losses", _focal),
    Check("smooth_l1_loss", "losses", _smooth_l1),
    Check("rpn_head", "detector", _rpn_head),
    Check("roi_head", "detector", _roi_head),
]

SCOPES = tuple(dict.fromkeys(c.scope for c in CHECKS))


def select(scope: str = "all") -> list:
    if scope == "all":
        return list(CHECKS)
    chosen = [c for c in CHECKS if c.scope == scope or c.op == scope]
    if not chosen:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from all, {', '.join(SCOPES)}")
    return chosen


def run_all(scope: str = "all", n_seeds: int = 20, base_seed: int = 0, report: Optional[Callable[[str], None]] = None) -> list:
    results = []
    for check in select(scope):
        res = run_check(check, range(base_seed, base_seed + n_seeds))
        results.append(res)
        if report is not None:
            report(res.line())
    return results
