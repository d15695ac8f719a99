"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive computes its value eagerly and, when a tape is active and at
least one input requires a gradient, appends a record holding the closure that
maps the output cotangent to input cotangents. ``backward`` replays the
records in reverse order.

Tensors carry an arbitrary number of leading batch axes; the "vector" axis is
always the last one.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class Tensor:
    """A dense float64 array that may participate in gradient computation."""

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; each maps onto a recorded primitive.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications.

    Use as a context manager to make it the active tape of the current thread::

        with Tape() as tape:
            loss = ...
        grads = backward(loss, tape)
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        """Trainable tensors that entered the recorded graph as inputs."""
        produced = {id(r.output) for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(op, out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.value.shape == b.value.shape:
        return a.value.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., n) and a matrix ``w`` of shape (n, m).

    A 1-D ``x`` is the matrix-vector case ``w.T x``.
    """
    if w.value.ndim != 2 or x.value.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    xv, wv = x.value, w.value

    def back(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _emit("matmul", xv @ wv, (x, w), back)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.value)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no operands")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % value.ndim
    edges = np.concatenate([[0], np.cumsum([t.shape[ax] for t in tensors])]).tolist()
    lead = (slice(None),) * ax

    def back(g):
        return tuple(g[lead + (slice(lo, hi),)] for lo, hi in zip(edges[:-1], edges[1:]))

    return _emit("concat", value, tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: no operands")
    try:
        value = np.stack([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"stack: incompatible shapes {shapes}") from None
    n = len(tensors)
    return _emit("stack", value, tensors,
                 lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis). Fancy indexing is not supported."""
    try:
        value = a.value[index]
    except IndexError as e:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {e}") from None
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _emit("slice", np.array(value, dtype=DTYPE), (a,), back)


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    shape = a.shape
    value = a.value.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(value), (a,), back)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if a.size == 0:
        raise ShapeError(f"mean: empty tensor of shape {a.shape}")
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis), 1.0 / count)


def sq_norm(a: Tensor) -> Tensor:
    """Squared L2 norm over the last axis."""
    av = a.value
    return _emit("sq_norm", np.asarray((av * av).sum(axis=-1)), (a,),
                 lambda g: (2.0 * av * g[..., None],))


# ---------------------------------------------------------------------------
# differentiation


Gradient = dict  # Tensor -> np.ndarray, keyed by identity


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> Gradient:
    """Return d(loss)/d(param) for every trainable tensor reachable from ``loss``.

    Tensors listed in ``params`` but absent from the graph receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not math.isfinite(loss.item()):
        raise FloatingPointError(f"backward: loss is not finite ({loss.item()})")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    keep: dict[int, Tensor] = {id(loss): loss}
    # finite inputs can only turn non-finite through overflow or an invalid operation
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        for rec in reversed(tape.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            try:
                in_grads = rec.backward(g)
                for t, gi in zip(rec.inputs, in_grads):
                    if gi is None or not t.requires_grad:
                        continue
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                        keep[key] = t
            except FloatingPointError as e:
                raise FloatingPointError(f"non-finite gradient in primitive '{rec.op}': {e}") from None
    out: Gradient = {}
    for key, g in grads.items():
        t = keep[key]
        if t.requires_grad:
            out[t] = g.reshape(t.shape)
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros(p.shape, dtype=DTYPE)
    return out


def grad_check(f: Callable[[], Tensor], theta: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its scalar output from the current contents of
    ``theta.value``; the perturbation is done in place and restored.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    with Tape() as tape:
        out = f()
    analytic = backward(out, tape, [theta])[theta]
    flat = theta.value.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"grad_check: non-finite value perturbing coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * eps)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))))
