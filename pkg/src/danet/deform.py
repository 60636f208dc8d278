"""Deformable 2-D convolution with learned per-location sampling offsets.

For every output location ``p0`` and kernel tap ``p_n`` the input is read at
``p0 + p_n + dp_n`` by bilinear interpolation (zero outside the map) and
weighted by ``w(p_n)``.  Offsets come as ``[2K, H', W']`` with ``K = kH*kW``;
channel ``2n`` is the row shift and ``2n + 1`` the column shift of tap ``n``
(taps in row-major kernel order).  A single offset group is shared by all
input channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from . import ops
from .nn import ConvWeights, Module
from .tensor import Function, Tensor, record_margin


@dataclass
class OffsetField:
    offsets: Tensor
    kernel_size: tuple[int, int]

    def __post_init__(self) -> None:
        kh, kw = self.kernel_size
        if self.offsets.shape[-3] != 2 * kh * kw:
            raise ValueError(
                f"offset field needs {2 * kh * kw} channels for a {kh}x{kw} kernel, "
                f"got {self.offsets.shape[-3]}"
            )

    @classmethod
    def zeros(cls, kernel_size: tuple[int, int], out_h: int, out_w: int, dtype: Any = np.float64) -> "OffsetField":
        kh, kw = kernel_size
        return cls(Tensor(np.zeros((2 * kh * kw, out_h, out_w), dtype=dtype)), kernel_size)

    @property
    def dy(self) -> np.ndarray:
        return self.offsets.data[..., 0::2, :, :]

    @property
    def dx(self) -> np.ndarray:
        return self.offsets.data[..., 1::2, :, :]


def _sample_grid(offsets: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Absolute sampling rows/cols ``[N, K, H', W']`` for every tap and location."""
    n, _, ho, wo = offsets.shape
    ki, kj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    ki = ki.reshape(1, -1, 1, 1)
    kj = kj.reshape(1, -1, 1, 1)
    base_y = (np.arange(ho) * stride - padding).reshape(1, 1, -1, 1)
    base_x = (np.arange(wo) * stride - padding).reshape(1, 1, 1, -1)
    ys = base_y + ki + offsets[:, 0::2]
    xs = base_x + kj + offsets[:, 1::2]
    return ys, xs


class DeformConv2dFn(Function):
    def forward(self, x, w, b, offsets, stride, padding, track_margin=False):
        n, c, h, wd = x.shape
        oc, ic, kh, kw = w.shape
        if ic != c:
            raise ValueError(f"deform_conv2d: input has {c} channels, kernel expects {ic}")
        ho = ops.conv_output_size(h, kh, stride, padding)
        wo = ops.conv_output_size(wd, kw, stride, padding)
        k = kh * kw
        if offsets.shape != (n, 2 * k, ho, wo):
            raise ValueError(
                f"offset field shape {offsets.shape[1:]} does not match "
                f"{(2 * k, ho, wo)} for this kernel and output size"
            )
        ys, xs = _sample_grid(offsets, kh, kw, stride, padding)
        if track_margin:
            record_margin(ops.integer_margin(np.concatenate([ys.ravel(), xs.ravel()])))
        # rows ordered (n, ho, wo, k); columns address the flattened batch of maps
        ys_r = ys.transpose(0, 2, 3, 1)
        xs_r = xs.transpose(0, 2, 3, 1)
        col_off = np.broadcast_to((np.arange(n) * h * wd).reshape(n, 1, 1, 1), ys_r.shape)
        s, sy, sx = ops.bilinear_operator(
            ys_r, xs_r, h, wd, column_offset=col_off, n_cols=n * h * wd,
            with_coord_grads=True, dtype=x.dtype,
        )
        flat = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
        sampled = np.asarray(s @ flat)  # [n*ho*wo*k, c]
        cols = sampled.reshape(n * ho * wo, k, c).transpose(0, 2, 1).reshape(n * ho * wo, c * k)
        wm = w.reshape(oc, c * k)
        out = cols @ wm.T
        if b is not None:
            out = out + b
        self.save(s, sy, sx, flat, cols, wm, x.shape, w.shape, ho, wo, b is not None)
        return out.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)

    def backward(self, grad):
        s, sy, sx, flat, cols, wm, xshape, wshape, ho, wo, has_bias = self.saved
        n, c, h, wd = xshape
        oc, _, kh, kw = wshape
        k = kh * kw
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, oc)
        dw = (gm.T @ cols).reshape(wshape)
        db = gm.sum(axis=0) if has_bias else None
        dsampled = (gm @ wm).reshape(n * ho * wo, c, k).transpose(0, 2, 1).reshape(-1, c)
        dflat = np.asarray(s.T @ dsampled)
        dx = dflat.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        gy = np.sum(np.asarray(sy @ flat) * dsampled, axis=1).reshape(n, ho, wo, k)
        gx = np.sum(np.asarray(sx @ flat) * dsampled, axis=1).reshape(n, ho, wo, k)
        doff = np.empty((n, 2 * k, ho, wo), dtype=grad.dtype)
        doff[:, 0::2] = gy.transpose(0, 3, 1, 2)
        doff[:, 1::2] = gx.transpose(0, 3, 1, 2)
        return dx, dw, db, doff


def deform_conv2d(
    x: Tensor,
    weight: Tensor,
    offsets: Any,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """``y(p0) = sum_n w(p_n) x(p0 + p_n + dp_n) + b`` with bilinear reads.

    ``offsets`` is an :class:`OffsetField` or a tensor ``[2K, H', W']``
    (``[N, 2K, H', W']`` for batched input).
    """
    if isinstance(offsets, OffsetField):
        if offsets.kernel_size != tuple(weight.shape[2:]):
            raise ValueError("offset field was built for a different kernel size")
        offsets = offsets.offsets
    if not isinstance(offsets, Tensor):
        offsets = Tensor(np.asarray(offsets, dtype=x.dtype))
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
        if offsets.ndim != 3:
            raise ValueError(f"offset field for a single map must be [2K,H',W'], got {offsets.shape}")
        offsets = offsets.reshape((1,) + offsets.shape)
    y = DeformConv2dFn.apply(
        x, weight, bias, offsets, stride=stride, padding=padding,
        track_margin=offsets.requires_grad,
    )
    return y.reshape(y.shape[1:]) if squeeze else y


def offset_branch(x: Tensor, w_off: ConvWeights, kernel_size: tuple[int, int]) -> OffsetField:
    """Predict an :class:`OffsetField` with a plain convolution over ``x``."""
    kh, kw = kernel_size
    if w_off.out_channels != 2 * kh * kw:
        raise ValueError(
            f"offset branch must output 2*kH*kW = {2 * kh * kw} channels, has {w_off.out_channels}"
        )
    return OffsetField(w_off(x), kernel_size)


def deform_conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    offsets: np.ndarray,
    upstream: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, weight, offsets) of ``sum(upstream * deform_conv2d(...))``."""
    xt = Tensor(x, requires_grad=True)
    wt = Tensor(weight, requires_grad=True)
    ot = Tensor(offsets, requires_grad=True)
    bt = None if bias is None else Tensor(bias)
    y = deform_conv2d(xt, wt, ot, bt, stride, padding)
    y.backward(upstream)
    return xt.grad, wt.grad, ot.grad


class DeformConv2d(Module):
    """Deformable conv layer with its own zero-initialised offset predictor."""

    def __init__(self, weights: ConvWeights, offset_weights: Optional[ConvWeights] = None):
        kh, kw = weights.kernel_size
        self.conv = weights
        if offset_weights is None:
            in_ch = weights.weight.shape[1]
            offset_weights = ConvWeights(
                np.zeros((2 * kh * kw, in_ch, kh, kw)),
                None,
                weights.stride,
                weights.padding,
                dtype=weights.weight.dtype,
            )
        if offset_weights.stride != weights.stride or offset_weights.padding != weights.padding:
            raise ValueError("offset branch must share stride and padding with the main kernel")
        self.offset = offset_weights

    def __call__(self, x: Tensor) -> Tensor:
        field = offset_branch(x, self.offset, self.conv.kernel_size)
        return deform_conv2d(
            x, self.conv.weight, field.offsets, self.conv.bias, self.conv.stride, self.conv.padding
        )
