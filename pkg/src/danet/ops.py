"""Differentiable kernels: convolution, pooling, dense, activations, sampling.

Spatial kernels work on ``[N, C, H, W]`` batches; the public wrappers also
accept a single ``[C, H, W]`` map.  Bilinear sampling is expressed as a
sparse linear operator (four weights per sample point) so that forward,
input gradient and coordinate gradient are all sparse-dense products.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, Tensor, record_margin

LEAKY_SLOPE = 0.01


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ValueError(
            f"kernel {kernel} with padding {padding} does not fit input extent {size}"
        )
    return span // stride + 1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


class Conv2dFn(Function):
    def forward(self, x, w, b=None, stride=1, padding=0):
        n, c, h, wd = x.shape
        oc, ic, kh, kw = w.shape
        if ic != c:
            raise ValueError(f"conv2d: input has {c} channels, kernel expects {ic}")
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(wd, kw, stride, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        wm = w.reshape(oc, -1)
        out = cols @ wm.T
        if b is not None:
            out = out + b
        self.save(cols, wm, x.shape, w.shape, stride, padding, ho, wo, b is not None)
        return out.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, wm, xshape, wshape, stride, padding, ho, wo, has_bias = self.saved
        n, c, h, wd = xshape
        oc, _, kh, kw = wshape
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, oc)
        dw = (gm.T @ cols).reshape(wshape)
        db = gm.sum(axis=0) if has_bias else None
        # channel-major layout keeps each tap's scatter contiguous
        dcols = (wm.T @ gm.T).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + wd].transpose(1, 0, 2, 3)
        return dx, dw, db


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation with zero padding: ``y(p0) = sum_n w(p_n) x(p0 + p_n) + b``."""
    if weight.ndim != 4:
        raise ValueError(f"conv2d kernel must be [outC,inC,kH,kW], got {weight.shape}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    xb, squeeze = _batched(x)
    y = Conv2dFn.apply(xb, weight, bias, stride=stride, padding=padding)
    return _unbatched(y, squeeze)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


class Pool2dFn(Function):
    def forward(self, x, mode, window, stride):
        n, c, h, w = x.shape
        if window > h or window > w:
            raise ValueError(f"pool window {window} larger than input {h}x{w}")
        ho = (h - window) // stride + 1
        wo = (w - window) // stride + 1
        win = sliding_window_view(x, (window, window), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        flat = win.reshape(n, c, ho, wo, window * window)
        if mode == "avg":
            out = flat.mean(axis=-1)
            arg = None
        else:
            arg = flat.argmax(axis=-1)
            out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
            if window > 1:
                second = np.partition(flat, -2, axis=-1)[..., -2]
                record_margin(np.min(out - second))
        self.save(x.shape, mode, window, stride, ho, wo, arg)
        return out

    def backward(self, grad):
        shape, mode, window, stride, ho, wo, arg = self.saved
        dx = np.zeros(shape, dtype=grad.dtype)
        for i in range(window):
            for j in range(window):
                if mode == "avg":
                    contrib = grad / (window * window)
                else:
                    contrib = grad * (arg == i * window + j)
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        return dx


def pool2d(x: Tensor, mode: str = "max", window: int = 2, stride: Optional[int] = None) -> Tensor:
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if window < 1:
        raise ValueError("pool window must be >= 1")
    xb, squeeze = _batched(x)
    y = Pool2dFn.apply(xb, mode=mode, window=window, stride=stride or window)
    return _unbatched(y, squeeze)


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce H x W to 1 x 1 per channel."""
    if mode == "avg":
        return x.mean(axis=(-2, -1), keepdims=True)
    if mode == "max":
        lead = x.shape[:-2]
        return x.reshape(lead + (-1,)).max(axis=-1).reshape(lead + (1, 1))
    raise ValueError(f"unknown pool mode {mode!r}")


# ---------------------------------------------------------------------------
# dense layer and activations
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, activation: Optional[str] = None) -> Tensor:
    """Affine map ``W x + b`` over the last axis, then an optional activation."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"dense: input has {x.shape[-1]} features, weight expects {weight.shape[1]}"
        )
    y = x @ weight.transpose()
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
        y = y + bias
    return activate(y, activation)


def activate(x: Tensor, activation: Optional[str]) -> Tensor:
    if activation is None:
        return x
    if activation == "relu":
        return relu(x)
    if activation == "leaky_relu":
        return leaky_relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class SigmoidFn(Function):
    def forward(self, x):
        s = _sigmoid(np.asarray(x))
        self.save(s)
        return s

    def backward(self, grad):
        (s,) = self.saved
        return grad * s * (1.0 - s)


class LeakyReluFn(Function):
    def forward(self, x, slope):
        record_margin(np.min(np.abs(x)) if x.size else np.inf)
        mask = x > 0
        self.save(mask, slope)
        return np.where(mask, x, slope * x)

    def backward(self, grad):
        mask, slope = self.saved
        return np.where(mask, grad, slope * grad)


def sigmoid(x: Tensor) -> Tensor:
    return SigmoidFn.apply(x)


def relu(x: Tensor) -> Tensor:
    return LeakyReluFn.apply(x, slope=0.0)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return LeakyReluFn.apply(x, slope=slope)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_operator(
    ys: np.ndarray,
    xs: np.ndarray,
    height: int,
    width: int,
    column_offset: Optional[np.ndarray] = None,
    n_cols: Optional[int] = None,
    with_coord_grads: bool = False,
    dtype: np.dtype = np.float64,
):
    """Sparse bilinear interpolation matrix for a set of sample points.

    Row ``m`` holds the four corner weights of point ``(ys[m], xs[m])`` over a
    flattened ``height x width`` grid (``x`` is the column, ``y`` the row).
    Corners outside the grid get weight zero, so points beyond the one-pixel
    band around the map sample exactly zero.  ``column_offset`` shifts each
    row into a block of a larger batch of maps.  With ``with_coord_grads`` the
    matrices of d(weights)/dy and d(weights)/dx are returned as well.
    """
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    m = ys.size
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ly = ys - y0
    lx = xs - x0
    hy = 1.0 - ly
    hx = 1.0 - lx
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners = (
        (y0, x0, hy * hx, -hx, -hy),
        (y0, x0 + 1, hy * lx, -lx, hy),
        (y0 + 1, x0, ly * hx, hx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    )
    rows, cols, vals, dys, dxs = [], [], [], [], []
    base = np.zeros(m, dtype=np.int64) if column_offset is None else np.asarray(column_offset).reshape(-1)
    row_idx = np.arange(m)
    for cy, cx, wt, dwy, dwx in corners:
        valid = (cy >= 0) & (cy < height) & (cx >= 0) & (cx < width)
        rows.append(row_idx[valid])
        cols.append(base[valid] + cy[valid] * width + cx[valid])
        vals.append(wt[valid])
        dys.append(dwy[valid])
        dxs.append(dwx[valid])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (m, n_cols if n_cols is not None else height * width)

    def build(v):
        return sp.csr_matrix((np.concatenate(v).astype(dtype), (rows, cols)), shape=shape)

    if not with_coord_grads:
        return build(vals)
    return build(vals), build(dys), build(dxs)


def integer_margin(coords: np.ndarray) -> float:
    if coords.size == 0:
        return np.inf
    frac = coords - np.floor(coords)
    return float(np.min(np.minimum(frac, 1.0 - frac)))


class BilinearSampleFn(Function):
    """Sample ``[C,H,W]`` at points ``(ys, xs)``; returns ``[C, M]``."""

    def forward(self, x, ys, xs):
        c, h, w = x.shape
        s, sy, sx = bilinear_operator(ys, xs, h, w, with_coord_grads=True, dtype=x.dtype)
        flat = x.reshape(c, h * w).T
        self.save(s, sy, sx, flat, x.shape, np.shape(ys))
        return (s @ flat).T.reshape((c,) + np.shape(ys))

    def backward(self, grad):
        s, sy, sx, flat, shape, pshape = self.saved
        c, h, w = shape
        g = grad.reshape(c, -1).T  # [M, C]
        dx = (s.T @ g).T.reshape(shape)
        dys = np.sum(np.asarray(sy @ flat) * g, axis=1).reshape(pshape)
        dxs = np.sum(np.asarray(sx @ flat) * g, axis=1).reshape(pshape)
        return dx, dys, dxs


def bilinear_sample(x: Tensor, xs, ys) -> Tensor:
    """Bilinear value of ``x`` at column ``xs`` and row ``ys``.

    ``xs`` and ``ys`` are scalars, arrays or tensors of one common shape; the
    result has shape ``[C, *shape]``.  Points are zero-padded outside the map.
    """
    if x.ndim != 3:
        raise ValueError(f"bilinear_sample expects [C,H,W], got {x.shape}")
    xs_t = xs if isinstance(xs, Tensor) else Tensor(np.asarray(xs, dtype=x.dtype))
    ys_t = ys if isinstance(ys, Tensor) else Tensor(np.asarray(ys, dtype=x.dtype))
    if xs_t.requires_grad or ys_t.requires_grad:
        record_margin(integer_margin(np.concatenate([xs_t.data.ravel(), ys_t.data.ravel()])))
    return BilinearSampleFn.apply(x, ys_t, xs_t)


def _upsample_matrix(src: int, dst: int) -> np.ndarray:
    """1-D half-pixel (align-corners false) interpolation weights ``[dst, src]``."""
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, None)
    i0 = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    mat = np.zeros((dst, src))
    np.add.at(mat, (np.arange(dst), i0), 1.0 - frac)
    np.add.at(mat, (np.arange(dst), i1), frac)
    return mat


class UpsampleFn(Function):
    def forward(self, x, out_h, out_w):
        uy = _upsample_matrix(x.shape[-2], out_h).astype(x.dtype)
        ux = _upsample_matrix(x.shape[-1], out_w).astype(x.dtype)
        self.save(uy, ux)
        return np.einsum("ij,...jk,lk->...il", uy, x, ux, optimize=True)

    def backward(self, grad):
        uy, ux = self.saved
        return np.einsum("ij,...il,lk->...jk", uy, grad, ux, optimize=True)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with half-pixel bilinear interpolation.

    Source coordinate is ``(dst + 0.5) * in/out - 0.5``; samples beyond the
    border are clamped to the edge pixels.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"upsample target must be positive, got {out_h}x{out_w}")
    if out_h < x.shape[-2] or out_w < x.shape[-1]:
        raise ValueError(
            f"upsample target {out_h}x{out_w} smaller than input {x.shape[-2]}x{x.shape[-1]}"
        )
    return UpsampleFn.apply(x, out_h=out_h, out_w=out_w)
