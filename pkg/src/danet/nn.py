"""Parameter containers: modules own tensors and enumerate them by dotted name."""

from __future__ import annotations

from typing import Any, Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base container.

    Parameters are attributes holding a :class:`Tensor` with
    ``requires_grad``; sub-modules are attributes holding a :class:`Module`
    or a list of modules.  Enumeration follows attribute assignment order,
    which keeps checkpoint layout stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype)

    def astype(self, dtype: Any) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def param(data: np.ndarray, dtype: Any = np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = np.sqrt(2.0)) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class ConvWeights(Module):
    """Kernel ``[outC, inC, kH, kW]``, bias ``[outC]``, stride and padding."""

    def __init__(
        self,
        kernel: np.ndarray,
        bias: Optional[np.ndarray] = None,
        stride: int = 1,
        padding: int = 0,
        dtype: Any = np.float32,
    ):
        kernel = np.asarray(kernel)
        if kernel.ndim != 4 or min(kernel.shape[2:]) < 1:
            raise ValueError(f"kernel must be [outC,inC,kH,kW] with kH,kW >= 1, got {kernel.shape}")
        if padding < 0 or stride < 1:
            raise ValueError("padding must be >= 0 and stride >= 1")
        self.weight = param(kernel, dtype)
        self.bias = param(np.zeros(kernel.shape[0]) if bias is None else bias, dtype)
        self._stride = stride
        self._padding = padding

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        k: int,
        stride: int = 1,
        padding: Optional[int] = None,
        std: Optional[float] = None,
        dtype: Any = np.float32,
    ) -> "ConvWeights":
        shape = (out_ch, in_ch, k, k)
        if std is None:
            kernel = kaiming(rng, shape, in_ch * k * k)
        elif std == 0:
            kernel = np.zeros(shape)
        else:
            kernel = rng.normal(0.0, std, size=shape)
        return cls(kernel, None, stride, k // 2 if padding is None else padding, dtype)

    @property
    def stride(self) -> int:
        return self._stride

    @property
    def padding(self) -> int:
        return self._padding

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class Linear(Module):
    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray] = None, dtype: Any = np.float32):
        self.weight = param(weight, dtype)
        self.bias = param(np.zeros(weight.shape[0]) if bias is None else bias, dtype)

    @classmethod
    def init(cls, rng: np.random.Generator, in_f: int, out_f: int, std: Optional[float] = None, dtype: Any = np.float32) -> "Linear":
        if std is None:
            w = kaiming(rng, (out_f, in_f), in_f)
        else:
            w = rng.normal(0.0, std, size=(out_f, in_f))
        return cls(w, None, dtype)

    def __call__(self, x: Tensor, activation: Optional[str] = None) -> Tensor:
        return ops.dense(x, self.weight, self.bias, activation)
