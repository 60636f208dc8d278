"""Dense tensor with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over raw numpy arrays and a ``backward`` returning one gradient
per input.  ``Function.apply`` wraps the result in a :class:`Tensor` that
remembers its creator, and :meth:`Tensor.backward` walks the graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction for the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def kink_probe() -> Iterator[list]:
    """Collect distances to non-differentiable points seen during forward.

    Piecewise ops (relu, max, bilinear floor) append the smallest distance
    between their inputs and a kink.  Finite-difference checks use this to
    reject probe points where a central difference straddles a kink.
    """
    prev = getattr(_state, "margins", None)
    margins: list = []
    _state.margins = margins
    try:
        yield margins
    finally:
        _state.margins = prev


def record_margin(value: float) -> None:
    margins = getattr(_state, "margins", None)
    if margins is not None:
        margins.append(float(value))


def _as_array(data: Any, dtype: Optional[np.dtype] = None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Any = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self._ctx is None:
            if not self.requires_grad:
                raise RuntimeError(
                    "backward() on a tensor that was not produced by a differentiable "
                    "forward pass"
                )
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = ctx.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(ctx.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return Add.apply(self, Neg.apply(_wrap(other, self)))

    def __rsub__(self, other: Any) -> "Tensor":
        return Add.apply(_wrap(other, self), Neg.apply(self))

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return Index.apply(self, index=index)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=axis, keepdims=keepdims)


def _wrap(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for inp in node._ctx.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    order.reverse()
    return order


class Function:
    """One differentiable operation: ``forward`` on arrays, ``backward`` on grads."""

    def __init__(self) -> None:
        self.inputs: Sequence[Any] = ()
        self._saved: Optional[tuple] = None

    def save(self, *values: Any) -> None:
        self._saved = values

    @property
    def saved(self) -> tuple:
        if self._saved is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._saved

    def forward(self, *arrays: Any, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Any:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        fn = cls()
        arrays = [x.data if isinstance(x, Tensor) else x for x in inputs]
        out = fn.forward(*arrays, **kwargs)
        track = grad_enabled() and any(
            isinstance(x, Tensor) and x.requires_grad for x in inputs
        )
        result = Tensor(out)
        if track:
            fn.inputs = inputs
            result.requires_grad = True
            result._ctx = fn
        return result


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Add(Function):
    def forward(self, a, b):
        self.save(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


class Neg(Function):
    def forward(self, a):
        self.save(True)
        return -a

    def backward(self, grad):
        self.saved
        return -grad


class Mul(Function):
    def forward(self, a, b):
        self.save(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


class MatMul(Function):
    def forward(self, a, b):
        if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
            raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        self.save(a, b)
        return a @ b

    def backward(self, grad):
        a, b = self.saved
        if a.ndim == 1 and b.ndim == 2:
            return grad @ b.T, np.outer(a, grad)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(grad, b), a.T @ grad
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


class Reshape(Function):
    def forward(self, a, shape):
        self.save(a.shape)
        return a.reshape(shape)

    def backward(self, grad):
        (shape,) = self.saved
        return grad.reshape(shape)


class Transpose(Function):
    def forward(self, a, axes):
        axes = axes or tuple(reversed(range(a.ndim)))
        self.save(axes)
        return np.transpose(a, axes)

    def backward(self, grad):
        (axes,) = self.saved
        return np.transpose(grad, np.argsort(axes))


class Index(Function):
    def forward(self, a, index):
        self.save(a.shape, index)
        return a[index]

    def backward(self, grad):
        shape, index = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        if _is_unique_rows(index):
            out[index] = grad
        else:
            np.add.at(out, index, grad)
        return out


def _is_unique_rows(index: Any) -> bool:
    """True for a 1-D integer array without repeats (plain assignment is then exact)."""
    if not isinstance(index, np.ndarray) or index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        return False
    return np.unique(index).size == index.size


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.save(a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return np.broadcast_to(grad, shape).copy()


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.save(a.shape, axis, keepdims, a.size // max(np.size(out), 1))
        return out

    def backward(self, grad):
        shape, axis, keepdims, count = self.saved
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return np.broadcast_to(grad / count, shape).copy()


class Max(Function):
    """Reduction max; the gradient goes to the first maximal entry."""

    def forward(self, a, axis=None, keepdims=False):
        if axis is None:
            flat = a.reshape(-1)
            idx = int(np.argmax(flat))
            if flat.size > 1:
                record_margin(flat[idx] - np.partition(flat, -2)[-2])
            self.save(a.shape, None, keepdims, idx)
            out = flat[idx]
            return np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out)
        axis = axis if axis >= 0 else a.ndim + axis
        idx = np.argmax(a, axis=axis)
        if a.shape[axis] > 1:
            top2 = -np.partition(-a, 1, axis=axis)
            top2 = np.take(top2, [0, 1], axis=axis)
            record_margin(np.min(np.take(top2, 0, axis=axis) - np.take(top2, 1, axis=axis)))
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
        self.save(a.shape, axis, keepdims, idx)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, grad):
        shape, axis, keepdims, idx = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        if axis is None:
            out.reshape(-1)[idx] = np.asarray(grad).reshape(-1)[0]
            return out
        if not keepdims:
            grad = np.expand_dims(grad, axis)
        np.put_along_axis(out, np.expand_dims(idx, axis), grad, axis=axis)
        return out


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.save(axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        axis, sizes = self.saved
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def tensor(data: Any, requires_grad: bool = False, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)
