"""Convolutional block attention: channel gate, then spatial gate.

Channel attention pools each channel globally (mean and max), passes both
vectors through one shared two-layer MLP with a leaky-ReLU hidden layer,
sums them and squashes with a sigmoid.  Spatial attention concatenates the
channel-wise mean and max maps, applies a 7x7 convolution and a sigmoid.
Both gates multiply onto the features with broadcasting.
"""

from __future__ import annotations

from typing import Any, Optional

import numpy as np

from . import ops
from .nn import ConvWeights, Module, kaiming, param
from .tensor import Tensor, concat

DEFAULT_REDUCTION = 16


class CbamWeights(Module):
    """Shared MLP ``W1 . act(W0 . v)`` plus the 7x7 spatial kernel.

    ``w0`` is ``[C/r, C]`` and ``w1`` is ``[C, C/r]``.  MLP biases are off
    unless ``mlp_bias`` is set.
    """

    def __init__(
        self,
        w0: np.ndarray,
        w1: np.ndarray,
        spatial: ConvWeights,
        reduction: int,
        b0: Optional[np.ndarray] = None,
        b1: Optional[np.ndarray] = None,
        dtype: Any = np.float32,
    ):
        hidden, channels = np.shape(w0)
        if channels % reduction or channels // reduction != hidden or hidden < 1:
            raise ValueError(
                f"reduction ratio {reduction} must divide {channels} channels "
                f"and give hidden size {hidden}"
            )
        if np.shape(w1) != (channels, hidden):
            raise ValueError(f"w1 must be {(channels, hidden)}, got {np.shape(w1)}")
        if spatial.weight.shape != (1, 2, 7, 7) or spatial.padding != 3:
            raise ValueError("spatial attention kernel must be 1x2x7x7 with padding 3")
        self.w0 = param(w0, dtype)
        self.w1 = param(w1, dtype)
        if b0 is not None:
            self.b0 = param(b0, dtype)
            self.b1 = param(np.zeros(channels) if b1 is None else b1, dtype)
        self.spatial = spatial
        self._reduction = reduction

    @property
    def reduction(self) -> int:
        return self._reduction

    @property
    def mlp_bias(self) -> bool:
        return hasattr(self, "b0")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        reduction: int = DEFAULT_REDUCTION,
        mlp_bias: bool = False,
        dtype: Any = np.float32,
    ) -> "CbamWeights":
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} must divide {channels} channels")
        hidden = channels // reduction
        w0 = kaiming(rng, (hidden, channels), channels)
        w1 = kaiming(rng, (channels, hidden), hidden, gain=1.0)
        spatial = ConvWeights(rng.normal(0.0, 0.01, size=(1, 2, 7, 7)), None, 1, 3, dtype=dtype)
        zeros_h = np.zeros(hidden) if mlp_bias else None
        return cls(w0, w1, spatial, reduction, zeros_h, np.zeros(channels) if mlp_bias else None, dtype)


def _shared_mlp(v: Tensor, w: CbamWeights) -> Tensor:
    h = ops.dense(v, w.w0, w.b0 if w.mlp_bias else None, activation="leaky_relu")
    return ops.dense(h, w.w1, w.b1 if w.mlp_bias else None)


def channel_attention(f: Tensor, w: CbamWeights) -> Tensor:
    """``M_c(F)``: ``[C,1,1]`` (or ``[N,C,1,1]``) gate values in (0, 1)."""
    channels = f.shape[-3]
    if w.w0.shape[1] != channels:
        raise ValueError(f"CBAM weights built for {w.w0.shape[1]} channels, input has {channels}")
    lead = f.shape[:-2]
    avg = ops.global_pool(f, "avg").reshape(lead)
    mx = ops.global_pool(f, "max").reshape(lead)
    gate = ops.sigmoid(_shared_mlp(avg, w) + _shared_mlp(mx, w))
    return gate.reshape(lead + (1, 1))


def spatial_attention(f: Tensor, w: CbamWeights) -> Tensor:
    """``M_s(F)``: ``[1,H,W]`` (or ``[N,1,H,W]``) gate from a 7x7 conv over [mean; max]."""
    axis = f.ndim - 3
    mean_map = f.mean(axis=axis, keepdims=True)
    max_map = f.max(axis=axis, keepdims=True)
    pooled = concat([mean_map, max_map], axis=axis)
    return ops.sigmoid(w.spatial(pooled))


def cbam_apply(f: Tensor, w: CbamWeights) -> Tensor:
    """Refine ``F`` in two steps: ``F' = M_c(F) * F``, then ``F'' = M_s(F') * F'``."""
    refined = channel_attention(f, w) * f
    return spatial_attention(refined, w) * refined
