"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation computes its value eagerly with numpy and records, on the
output node, its parent tensors plus a closure that maps the upstream
gradient to per-parent gradients. ``backward`` on a scalar walks the graph
in reverse topological order and accumulates gradients into ``.grad``.

Gradients accumulate across backward calls (zero them between optimizer
steps). Everything is float64; determinism holds bit-for-bit for identical
inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_tape_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Invalid backward request (non-scalar loss, detached tensor)."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus reverse-mode bookkeeping.

    ``requires_grad`` marks trainable leaves; results of operations require
    grad iff any input does. ``tape_id`` is a creation-order identifier for
    the recorded computation.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_id",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id = next(_tape_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...],
                backward: Callable[[np.ndarray], tuple]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data + other.data
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data - other.data
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data * other.data
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))

        return Tensor._result(data, (a, b), bw)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        a = self

        def bw(g):
            return (-g,)

        return Tensor._result(-self.data, (a,), bw)

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / float(other))

    def __pow__(self, exponent: float) -> "Tensor":
        p = float(exponent)
        a = self
        data = self.data ** p

        def bw(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._result(data, (a,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._coerce(other))

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = self.data.reshape(shape)

        def bw(g):
            return (g.reshape(a.shape),)

        return Tensor._result(data, (a,), bw)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {self.shape}")
        a = self

        def bw(g):
            return (g.T,)

        return Tensor._result(self.data.T, (a,), bw)

    # -- reductions -------------------------------------------------------------

    def sum(self) -> "Tensor":
        a = self

        def bw(g):
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._result(np.asarray(self.data.sum()), (a,), bw)

    def sum_over_axis(self, axis: int) -> "Tensor":
        a = self
        axis = _check_axis(self, axis)
        data = self.data.sum(axis=axis)

        def bw(g):
            return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

        return Tensor._result(data, (a,), bw)

    def mean(self, axis: int) -> "Tensor":
        return mean_over_axis(self, axis)

    # -- elementwise nonlinearities ------------------------------------------------

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        a = self
        sign = np.sign(self.data)

        def bw(g):
            return (g * sign,)

        return Tensor._result(np.abs(self.data), (a,), bw)

    # -- backward ----------------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# free functions mirroring the operation surface
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product with the standard reverse-mode rules."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), bw)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), numerically stable at both tails."""
    data = np.logaddexp(0.0, x.data)
    # derivative is the logistic sigmoid; tanh form avoids overflow
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * sig,)

    return Tensor._result(data, (x,), bw)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis; backward spreads gradient / length."""
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    data = x.data.mean(axis=axis)

    def bw(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return Tensor._result(data, (x,), bw)


def squared_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, differentiable in both arguments."""
    if a.shape != b.shape:
        raise ShapeError(f"distance needs equal shapes, got {a.shape} and {b.shape}")
    d = a - b
    return (d * d).sum()


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along one axis; backward splits the gradient."""
    tensors = tuple(tensors)
    axis = _check_axis(tensors[0], axis)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(data, tensors, bw)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds (repeats allowed)."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    data = x.data[idx]

    def bw(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return Tensor._result(data, (x,), bw)


def im2col(x: Tensor, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold (B, H, W, C) into (B*OH*OW, kernel*kernel*C) patch rows.

    Forward and backward are kernel*kernel shifted block copies, so no
    scatter indexing is needed. Pairs with ``matmul`` to express convolution.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (B, H, W, C), got shape {x.shape}")
    b, h, w, c = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel {kernel} too large for input {x.shape} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((b, oh, ow, kernel, kernel, c), dtype=np.float64)
    for dy in range(kernel):
        for dx in range(kernel):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + stride * oh:stride,
                                          dx:dx + stride * ow:stride, :]
    data = cols.reshape(b * oh * ow, kernel * kernel * c)

    def bw(g):
        gc = g.reshape(b, oh, ow, kernel, kernel, c)
        gp = np.zeros((b, hp, wp, c), dtype=np.float64)
        for dy in range(kernel):
            for dx in range(kernel):
                gp[:, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride, :] += \
                    gc[:, :, :, dy, dx, :]
        if pad:
            gp = gp[:, pad:hp - pad, pad:wp - pad, :]
        return (gp,)

    return Tensor._result(data, (x,), bw)


def backward(loss: Tensor) -> None:
    """Populate .grad with dLoss/d(tensor) for every tensor reachable from loss.

    Requires a scalar loss produced by recorded operations. Gradients on
    fan-out nodes accumulate additively; repeated calls keep adding.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no recorded operation requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            # leaves hold gradients; interior nodes only pass them through
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg
