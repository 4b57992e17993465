"""A minimal reverse-mode automatic differentiation tape over numpy arrays.

Every :class:`Var` created from another var on a tape is appended to that
tape, so reverse creation order is a valid topological order for the sweep.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from ..errors import StateError

Vjp = Callable[[NDArray[np.float64]], Sequence]


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self.swept = False

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, requires_grad=requires_grad)

    def const(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, requires_grad=False)

    def backward(self, out: "Var", seed=None) -> None:
        if out.tape is not self:
            raise StateError("output does not belong to this tape")
        if self.swept:
            raise StateError("tape already swept; record a new forward pass")
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is None or node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                parent.grad = g if parent.grad is None else parent.grad + g
        self.swept = True


def _unbroadcast(g: NDArray[np.float64], shape: tuple[int, ...]) -> NDArray[np.float64]:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    __array_priority__ = 100.0

    def __init__(
        self,
        value: NDArray[np.float64],
        tape: Tape | None = None,
        parents: tuple["Var", ...] = (),
        vjp: Vjp | None = None,
        requires_grad: bool | None = None,
    ) -> None:
        self.value = value
        self.tape = tape
        self.grad: NDArray[np.float64] | None = None
        self._parents = parents
        self._vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        if parents and requires_grad and tape is not None:
            tape.nodes.append(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def detach(self) -> "Var":
        return Var(self.value, self.tape, requires_grad=False)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(np.asarray(other, dtype=np.float64), self.tape, requires_grad=False)

    def __add__(self, other):
        o = self._lift(other)
        sa, so = self.shape, o.shape
        return Var(self.value + o.value, self.tape or o.tape, (self, o),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, so)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, self.tape, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value
        return Var(a * b, self.tape or o.tape, (self, o),
                   lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value
        return Var(a / b, self.tape or o.tape, (self, o),
                   lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / b**2, b.shape)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        o = self._lift(other)
        a, b = self.value, o.value

        def vjp(g):
            if a.ndim == 1 and b.ndim == 1:
                ga, gb = g * b, g * a
            elif a.ndim == 1:
                ga, gb = g @ b.T, np.outer(a, g)
            elif b.ndim == 1:
                ga, gb = np.outer(g, b), a.T @ g
            else:
                ga, gb = g @ b.T, a.T @ g
            return ga, gb

        return Var(a @ b, self.tape or o.tape, (self, o), vjp)

    def __rmatmul__(self, other):
        return self._lift(other) @ self

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Var(np.asarray(self.value[idx], dtype=np.float64), self.tape, (self,), vjp)

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), self.tape, (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Var(np.asarray(self.value.sum(axis=axis, keepdims=keepdims)), self.tape, (self,), vjp)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis) / float(n)


def relu(x: Var) -> Var:
    mask = (x.value > 0).astype(np.float64)
    return Var(x.value * mask, x.tape, (x,), lambda g: (g * mask,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return Var(y, x.tape, (x,), lambda g: (g * (1.0 - y**2),))


def sigmoid(x: Var) -> Var:
    v = x.value
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Var(y, x.tape, (x,), lambda g: (g * y * (1.0 - y),))


def identity(x: Var) -> Var:
    return x


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return Var(y, x.tape, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return Var(y, x.tape, (x,), lambda g: (g * y,))


def square(x: Var) -> Var:
    v = x.value
    return Var(v**2, x.tape, (x,), lambda g: (2.0 * g * v,))


def norm(x: Var, axis: int = -1) -> Var:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    n = np.linalg.norm(x.value, axis=axis)
    safe = np.where(n > 0, n, 1.0)

    def vjp(g):
        unit = x.value / np.expand_dims(safe, axis)
        unit = np.where(np.expand_dims(n, axis) > 0, unit, 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return Var(n, x.tape, (x,), vjp)


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    sizes = [v.shape[axis] for v in xs]
    splits = np.cumsum(sizes)[:-1]
    tape = next((v.tape for v in xs if v.tape is not None), None)
    return Var(
        np.concatenate([v.value for v in xs], axis=axis),
        tape,
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def custom(inputs: Sequence[Var], value, vjp: Vjp) -> Var:
    """Node with a user-supplied vector-Jacobian product returning one gradient per input."""
    tape = next((v.tape for v in inputs if v.tape is not None), None)
    return Var(np.asarray(value, dtype=np.float64), tape, tuple(inputs), vjp)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity, "sigmoid": sigmoid, "softmax": softmax}
