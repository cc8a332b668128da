"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any). Calling
:func:`backward` on a scalar walks the tape once in reverse order and
accumulates ``.grad`` on every leaf tensor created with ``requires_grad=True``.
Outside a tape context the same operations run as plain numpy math.
"""

from __future__ import annotations

import builtins
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sigmoid",
    "swish",
    "exp",
    "log",
    "softmax",
    "concat",
    "split",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "clip",
    "gather_rows",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was asked to evaluate outside its mathematical domain."""


class Tensor:
    """A float64 n-d array that may carry a gradient.

    ``data`` is a numpy array stored C-contiguous (row-major). Leaf tensors
    created with ``requires_grad=True`` receive gradients in ``grad`` after
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager; tapes do not nest across threads and a new tape
    is built for every forward pass.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._previous = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        out.node = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward_fn))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = Tape._active
    if tape is not None and any(_tracks(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    A 2-D right operand acts as a weight shared by every leading index of
    ``a``; its gradient is summed over those indices.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        # fold leading axes of ``a`` into rows: plain GEMMs, no batched matmul
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if _tracks(a) else None
            return ga, a2.T @ g2

        return _result(data, (a, b), backward_fn)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), backward_fn)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def neg(x) -> Tensor:
    return scale(x, -1.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x) -> Tensor:
    """``x * sigmoid(x)``."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: input contains non-positive values")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax over ``axis`` (the last axis by default)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax: axis {axis} of shape {x.shape} is empty")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), backward_fn)


# -- structural ---------------------------------------------------------------


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    ndim = parts[0].ndim
    ax = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shape {p.shape} does not match {ref} off axis {axis}")
    if len(parts) == 1:
        return _result(parts[0].data.copy(), (parts[0],), lambda g: (g,))
    offsets = np.cumsum([p.shape[ax] for p in parts])[:-1]
    data = np.concatenate([p.data for p in parts], axis=ax)
    return _result(data, tuple(parts), lambda g: tuple(np.split(g, offsets, axis=ax)))


def split(x, sizes: Sequence[int], axis: int = -1) -> list:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    x = as_tensor(x)
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    ax = axis % x.ndim
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        idx = tuple(idx)

        def backward_fn(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        out.append(_result(x.data[idx].copy(), (x,), backward_fn))
        start += n
    return out


def reshape(x, shape: Iterable[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(data.copy(), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data), (x,), backward_fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def gather_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table with {table.shape[0]} rows")

    def backward_fn(g):
        flat = ids.reshape(-1)
        g2 = g.reshape(-1, table.shape[1])
        n = table.shape[0]
        # column-wise bincount is a much faster scatter-add than np.add.at
        return (np.stack([np.bincount(flat, weights=g2[:, j], minlength=n) for j in range(table.shape[1])], axis=1),)

    return _result(table.data[ids], (table,), backward_fn)


# -- reverse pass -----------------------------------------------------------


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Walks the tape once, newest node first. Leaf gradients are added to any
    existing ``.grad`` so callers should zero them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = tape or Tape._active
    if tape is None or loss.node is None or loss.node >= len(tape.nodes) or tape.nodes[loss.node].out is not loss:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise ValueError("backward: loss is not recorded on the active tape")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for index in range(loss.node, -1, -1):
        g = grads.pop(index, None)
        if g is None:
            continue
        node = tape.nodes[index]
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            if inp.node is not None:
                prev = grads.get(inp.node)
                grads[inp.node] = gi if prev is None else prev + gi
            elif inp.requires_grad:
                _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g

