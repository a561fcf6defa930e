"""Minimal reverse-mode autodiff on numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional gradient buffer. Operations
build a computation graph (a tape of parent links and vector-Jacobian
closures); calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order and accumulates gradients into the leaves.

Conventions:

* Gradients of intermediate nodes live only for the duration of one backward
  pass; only leaf tensors (``requires_grad=True``, no parents) keep a ``grad``
  buffer. Repeated ``backward()`` calls without ``zero_grad`` accumulate.
* Tensors carry whatever float dtype their data has. Training uses float32;
  gradient-check tests build float64 graphs for verification fidelity.
* Outputs are freshly allocated; no op mutates its inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NumericError",
    "ShapeError",
    "as_tensor",
    "concat",
    "no_grad",
    "grad_enabled",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class GraphError(RuntimeError):
    """Autodiff misuse: backward on a non-scalar or an unrecorded graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_needs", "_vjp")

    # keep numpy from hijacking `ndarray <op> Tensor`: defer to our reflected ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._needs: tuple[bool, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable["Tensor"],
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        parents = tuple(parents)
        # requires_grad is frozen into the record: flipping a parameter's flag
        # after the forward pass must not change an already-recorded graph.
        needs = tuple(p.requires_grad for p in parents)
        if _grad_enabled and any(needs):
            out.requires_grad = True
            out._parents = parents
            out._needs = needs
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._needs = ()
            out._vjp = None
        return out

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the graph."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into each leaf's ``grad``.

        ``self`` must be a scalar produced by recorded operations (or a
        recorded leaf). Intermediate gradients are transient; only leaves
        accumulate, so repeated calls without ``zero_grad`` add up.
        """
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor with no recorded graph")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p, need in zip(node._parents, node._needs):
                if need and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate into the persistent buffer
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, need, pg in zip(node._parents, node._needs, node._vjp(g)):
                if pg is None or not need:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, Tensor):
            return other.data
        return np.asarray(other, dtype=self.data.dtype)

    def __add__(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(f"add: {self.shape} vs {other.shape}")
            data = self.data + other.data
            return Tensor._from_op(data, (self, other),
                                   lambda g: (_unbroadcast(g, self.shape),
                                              _unbroadcast(g, other.shape)))
        data = self.data + self._coerce(other)
        return Tensor._from_op(data, (self,), lambda g: (_unbroadcast(g, self.shape),))

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(f"sub: {self.shape} vs {other.shape}")
            data = self.data - other.data
            return Tensor._from_op(data, (self, other),
                                   lambda g: (_unbroadcast(g, self.shape),
                                              _unbroadcast(-g, other.shape)))
        data = self.data - self._coerce(other)
        return Tensor._from_op(data, (self,), lambda g: (_unbroadcast(g, self.shape),))

    def __rsub__(self, other):
        data = self._coerce(other) - self.data
        return Tensor._from_op(data, (self,), lambda g: (_unbroadcast(-g, self.shape),))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(f"mul: {self.shape} vs {other.shape}")
            data = self.data * other.data
            a, b = self, other
            return Tensor._from_op(data, (a, b),
                                   lambda g: (_unbroadcast(g * b.data, a.shape),
                                              _unbroadcast(g * a.data, b.shape)))
        c = self._coerce(other)
        return Tensor._from_op(self.data * c, (self,),
                               lambda g: (_unbroadcast(g * c, self.shape),))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / float(other))

    def reciprocal(self) -> "Tensor":
        data = 1.0 / self.data
        return Tensor._from_op(data, (self,), lambda g: (-g * data * data,))

    # -- elementwise functions ----------------------------------------------

    def exp(self) -> "Tensor":
        data = np.exp(self.data)
        return Tensor._from_op(data, (self,), lambda g: (g * data,))

    def log(self) -> "Tensor":
        return Tensor._from_op(np.log(self.data), (self,),
                               lambda g: (g / self.data,))

    def square(self) -> "Tensor":
        return Tensor._from_op(self.data * self.data, (self,),
                               lambda g: (g * (2.0 * self.data),))

    def relu(self) -> "Tensor":
        data = np.maximum(self.data, 0.0)
        mask = self.data > 0
        return Tensor._from_op(data, (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        """Logistic function with a two-stage numeric guard.

        The pre-activation is clamped to [-30, 30] and the output is nudged one
        epsilon into (0, 1) for the active dtype, so log(y) and log(1-y) stay
        finite even in float32, where sigmoid(30) rounds to exactly 1.0.
        """
        pre = np.clip(self.data, -30.0, 30.0)
        y = 1.0 / (1.0 + np.exp(-pre))
        eps = np.finfo(self.data.dtype).eps
        y = np.clip(y, eps, 1.0 - eps)
        mask = (np.abs(self.data) < 30.0).astype(self.data.dtype)
        return Tensor._from_op(y, (self,), lambda g: (g * y * (1.0 - y) * mask,))

    def clip(self, lo: float, hi: float) -> "Tensor":
        data = np.clip(self.data, lo, hi)
        mask = ((self.data > lo) & (self.data < hi)).astype(self.data.dtype)
        return Tensor._from_op(data, (self,), lambda g: (g * mask,))

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None) -> "Tensor":
        data = np.asarray(self.data.sum(axis=axis))
        shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
            gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).astype(g.dtype, copy=True),)

        return Tensor._from_op(data, (self,), vjp)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> "Tensor":
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)
        return Tensor._from_op(data, (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, idx) -> "Tensor":
        data = self.data[idx]
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        shape, dtype = self.shape, self.data.dtype

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] += g  # basic indexing only: no duplicate targets
            return (full,)

        return Tensor._from_op(data, (self,), vjp)

    def broadcast_to(self, shape: tuple[int, ...]) -> "Tensor":
        data = np.broadcast_to(self.data, shape).astype(self.data.dtype, copy=True)
        src = self.shape
        return Tensor._from_op(data, (self,), lambda g: (_unbroadcast(g, src),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` with split backward."""
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return Tensor._from_op(data, tensors, vjp)
