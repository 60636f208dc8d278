"""Top-down feature pyramid: 1x1 lateral projections merged with upsampled coarser levels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .nn import ConvWeights, Module
from .ops import bilinear_upsample
from .tensor import Tensor

FPN_CHANNELS = 256
LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


@dataclass
class PyramidFeatures:
    """Ordered pyramid levels ``{level: feature}`` with their strides."""

    levels: dict = field(default_factory=dict)
    strides: dict = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def __iter__(self):
        return iter(sorted(self.levels))

    def __len__(self) -> int:
        return len(self.levels)

    def items(self):
        return [(k, self.levels[k]) for k in sorted(self.levels)]


class FpnWeights(Module):
    """One 1x1 lateral projection per backbone level, serialised as ``fpn.lateral{i}``."""

    def __init__(self, laterals: Mapping[int, ConvWeights]):
        for level in LEVELS:
            if level not in laterals:
                raise ValueError(f"missing lateral weights for level {level}")
            conv = laterals[level]
            if conv.kernel_size != (1, 1):
                raise ValueError(f"lateral{level} must be a 1x1 convolution")
            setattr(self, f"lateral{level}", conv)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_channels: Mapping[int, int],
        out_channels: int = FPN_CHANNELS,
        dtype: Any = np.float32,
    ) -> "FpnWeights":
        return cls(
            {
                level: ConvWeights.init(
                    rng, in_channels[level], out_channels, 1, std=gain_std(in_channels[level]), dtype=dtype
                )
                for level in LEVELS
            }
        )

    def lateral(self, level: int) -> ConvWeights:
        return getattr(self, f"lateral{level}")


def gain_std(fan_in: int) -> float:
    # unit-gain init keeps the merged sums at input scale
    return 1.0 / np.sqrt(fan_in)


def fpn_build(backbone_maps: Mapping[int, Tensor], weights: FpnWeights) -> PyramidFeatures:
    """Build P2..P5 from C2..C5, coarsest first.

    ``P5 = lateral5(C5)``; for ``i = 4, 3, 2``:
    ``P_i = lateral_i(C_i) + upsample(P_{i+1}, size of C_i)``.
    """
    for level in LEVELS:
        if level not in backbone_maps:
            raise ValueError(f"backbone map C{level} missing")
    for fine, coarse in zip(LEVELS[:-1], LEVELS[1:]):
        fs = backbone_maps[fine].shape[-2:]
        cs = backbone_maps[coarse].shape[-2:]
        if not (fs[0] > cs[0] and fs[1] > cs[1]):
            raise ValueError(
                f"C{fine} spatial size {fs} must be strictly larger than C{coarse} size {cs}"
            )
    pyramid = PyramidFeatures()
    top = weights.lateral(5)(backbone_maps[5])
    out = {5: top}
    for level in (4, 3, 2):
        c = backbone_maps[level]
        h, w = c.shape[-2:]
        top = weights.lateral(level)(c) + bilinear_upsample(top, h, w)
        out[level] = top
    pyramid.levels = {k: out[k] for k in LEVELS}
    pyramid.strides = {k: STRIDES[k] for k in LEVELS}
    return pyramid
