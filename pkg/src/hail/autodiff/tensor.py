"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every differentiable function records an :class:`Op` on its output while
grad mode is enabled and at least one input requires a gradient. Calling
:func:`backward` on a scalar orders the reachable ops topologically (the
tape) and walks them once in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True
_dtype = DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable op recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block (float32 otherwise).

    Only the finite-difference oracle uses this, to get a float64 reference.
    """
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


@dataclass(eq=False)
class Op:
    """One recorded operation: inputs, output and the rule mapping the
    output gradient to one gradient (or None) per input."""

    name: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """N-dimensional float32 array that may participate in a graph.

    ``data`` is a C-ordered numpy array so the flat layout is row-major with
    the last axis fastest. The shape is fixed at creation; :meth:`reshape`
    returns a new tensor.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: Op | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule) -> Tensor:
    """Wrap ``out_data`` in a tensor and attach an :class:`Op` if needed."""
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = Op(name, tuple(inputs), out, rule)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", (a, b), a.data + b.data, rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record("sub", (a, b), a.data - b.data, rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.data * b.data, rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def rule(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = a.data.dtype.type(exponent)

    def rule(g):
        return (g * p * a.data ** (p - 1),)

    return record("pow", (a,), a.data**p, rule)


def square(a) -> Tensor:
    a = as_tensor(a)
    return record("square", (a,), a.data * a.data, lambda g: (2 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", (a,), out, lambda g: (g / (2 * out),))


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    return record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    """max(0, v) elementwise; gradient is masked where v <= 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0), lambda g: (g * mask,))


# -- reductions and shape -------------------------------------------------
def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", (a,), out, rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(count), a.shape).copy(),)

    return record("mean", (a,), out, rule)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(tuple(shape))
    if out.size != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {tuple(shape)}")
    return record("reshape", (a,), out.copy(), lambda g: (g.reshape(a.shape),))


# -- backward -------------------------------------------------------------
def build_tape(loss: Tensor) -> list[Op]:
    """Ops reachable from ``loss`` in topological order (inputs first)."""
    tape: list[Op] = []
    seen: set[int] = set()
    if loss._op is None:
        return tape
    stack: list[tuple[Op, bool]] = [(loss._op, False)]
    while stack:
        op, expanded = stack.pop()
        if expanded:
            tape.append(op)
            continue
        if id(op) in seen:
            continue
        seen.add(id(op))
        stack.append((op, True))
        for t in reversed(op.inputs):
            if t._op is not None and id(t._op) not in seen:
                stack.append((t._op, False))
    return tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients from several uses of one tensor add up, and they add onto any
    gradient already stored from an earlier call.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if loss._op is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for op in reversed(build_tape(loss)):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=t.data.dtype)
            if t._op is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
