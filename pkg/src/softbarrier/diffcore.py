"""Reverse-mode automatic differentiation over small dense float64 arrays.

The tape is define-by-run: a :class:`Graph` records every operation applied to
its :class:`Var` handles, and :meth:`Graph.backward` walks the records in
reverse.  Values are plain numpy arrays; :class:`Tensor` is the immutable,
validated container used at API boundaries.

    >>> g = Graph()
    >>> x = g.leaf("x", 3.0)
    >>> y = x * x
    >>> float(y.value), float(g.backward(y)["x"])
    (9.0, 6.0)
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are inconsistent for an operation."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or supplied."""


class ContractError(ValueError):
    """A precondition of the API was violated."""


class Tensor:
    """Immutable row-major float64 array with a finiteness guarantee."""

    __slots__ = ("_data", "grad_required")

    def __init__(self, data, grad_required: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor entries must be finite")
        arr.setflags(write=False)
        self._data = arr
        self.grad_required = bool(grad_required)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad_required={self.grad_required})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor) and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Callable[[np.ndarray], tuple] | None = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out dimensions that were broadcast in the forward pass
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Var:
    """Handle to a node of a :class:`Graph`; supports arithmetic operators."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __neg__(self):
        return self.graph.mul(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def tanh(self):
        return self.graph.tanh(self)

    def sigmoid(self):
        return self.graph.sigmoid(self)

    def softplus(self):
        return self.graph.softplus(self)

    def exp(self):
        return self.graph.exp(self)

    def log(self):
        return self.graph.log(self)

    def square(self):
        return self.graph.square(self)

    def sum(self, axis=None):
        return self.graph.sum(self, axis)

    def mean(self, axis=None):
        return self.graph.mean(self, axis)


def _quiet(op):
    """Silence numpy overflow warnings; the op's _push reports them as NumericError."""
    @functools.wraps(op)
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return op(*args, **kwargs)
    return wrapped


class Graph:
    """Append-only operation tape.

    Nodes only ever reference earlier nodes, so the tape is acyclic and a
    single reverse sweep suffices for backpropagation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self.grad_required: set[int] = set()
        self._backward_done = False

    # -- leaves ---------------------------------------------------------------

    def leaf(self, name: str, value, requires_grad: bool = True) -> Var:
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} bound twice")
        arr = np.array(_as_array(value), dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"leaf {name!r} has non-finite entries")
        v = self._push("leaf", (), arr)
        self.leaves[name] = v.idx
        if requires_grad:
            self.grad_required.add(v.idx)
        return v

    def const(self, value) -> Var:
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    def _push(self, op, inputs, value, backward=None) -> Var:
        if op not in ("leaf", "const") and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by {op}")
        self.nodes.append(_Node(op, inputs, value, backward))
        return Var(self, len(self.nodes) - 1)

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.graph is not self:
                raise ContractError("Var belongs to a different graph")
            return x
        return self.const(_as_array(x))

    # -- elementwise binary ------------------------------------------------------

    def _broadcast_check(self, op, a, b):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None

    @_quiet
    def add(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        self._broadcast_check("add", av, bv)
        sa, sb = av.shape, bv.shape
        return self._push("add", (a.idx, b.idx), av + bv,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    @_quiet
    def sub(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        self._broadcast_check("sub", av, bv)
        sa, sb = av.shape, bv.shape
        return self._push("sub", (a.idx, b.idx), av - bv,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    @_quiet
    def mul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        self._broadcast_check("mul", av, bv)
        return self._push("mul", (a.idx, b.idx), av * bv,
                          lambda g: (_unbroadcast(g * bv, av.shape),
                                     _unbroadcast(g * av, bv.shape)))

    @_quiet
    def div(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        self._broadcast_check("div", av, bv)
        if np.any(bv == 0):
            raise NumericError("div: division by zero")
        out = av / bv
        return self._push("div", (a.idx, b.idx), out,
                          lambda g: (_unbroadcast(g / bv, av.shape),
                                     _unbroadcast(-g * out / bv, bv.shape)))

    @_quiet
    def matmul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
        return self._push("matmul", (a.idx, b.idx), av @ bv,
                          lambda g: (g @ bv.T, av.T @ g))

    # -- elementwise unary -----------------------------------------------------------

    def tanh(self, a) -> Var:
        a = self._lift(a)
        out = np.tanh(a.value)
        return self._push("tanh", (a.idx,), out, lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a) -> Var:
        a = self._lift(a)
        x = a.value
        # split by sign so exp never overflows
        ex = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        return self._push("sigmoid", (a.idx,), out, lambda g: (g * out * (1.0 - out),))

    def softplus(self, a) -> Var:
        a = self._lift(a)
        x = a.value
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        ex = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        return self._push("softplus", (a.idx,), out, lambda g: (g * sig,))

    @_quiet
    def exp(self, a) -> Var:
        a = self._lift(a)
        out = np.exp(a.value)
        return self._push("exp", (a.idx,), out, lambda g: (g * out,))

    def log(self, a) -> Var:
        a = self._lift(a)
        x = np.maximum(a.value, LOG_EPS)
        clamped = a.value < LOG_EPS
        return self._push("log", (a.idx,), np.log(x),
                          lambda g: (np.where(clamped, 0.0, g / x),))

    @_quiet
    def square(self, a) -> Var:
        a = self._lift(a)
        x = a.value
        return self._push("square", (a.idx,), x * x, lambda g: (2.0 * g * x,))

    # -- reductions and structure ------------------------------------------------------

    def sum(self, a, axis=None) -> Var:
        a = self._lift(a)
        x = a.value
        shape = x.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._push("sum", (a.idx,), np.asarray(x.sum(axis=axis)), back)

    def mean(self, a, axis=None) -> Var:
        a = self._lift(a)
        x = a.value
        shape = x.shape
        count = x.size if axis is None else x.shape[axis]
        if count == 0:
            raise ShapeError("mean: empty reduction")

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        return self._push("mean", (a.idx,), np.asarray(x.mean(axis=axis)), back)

    def concat(self, parts: Sequence, axis: int = -1) -> Var:
        vs = [self._lift(p) for p in parts]
        vals = [v.value for v in vs]
        try:
            out = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from None
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return self._push("concat", tuple(v.idx for v in vs), out,
                          lambda g: tuple(np.split(g, bounds, axis=axis)))

    def columns(self, a, start: int, stop: int) -> Var:
        """Slice ``a[:, start:stop]`` of a 2-D value."""
        a = self._lift(a)
        x = a.value
        if x.ndim != 2:
            raise ShapeError(f"columns: expected 2-D input, got shape {x.shape}")

        def back(g):
            full = np.zeros_like(x)
            full[:, start:stop] = g
            return (full,)

        return self._push("columns", (a.idx,), x[:, start:stop], back)

    # -- backward ------------------------------------------------------------------

    def backward(self, output: Var) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``output`` for every grad-required leaf, by name."""
        if output.graph is not self:
            raise ContractError("output belongs to a different graph")
        if output.value.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.idx] = np.ones_like(output.value)
        for idx in range(output.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if grads[inp] is None:
                    grads[inp] = gi
                else:
                    grads[inp] = grads[inp] + gi
        self._backward_done = True
        out = {}
        for name, idx in self.leaves.items():
            if idx in self.grad_required:
                g = grads[idx]
                out[name] = np.zeros_like(self.nodes[idx].value) if g is None else g
        return out


def forward(fn: Callable[..., Var], leaf_bindings: Mapping[str, Tensor | np.ndarray | float]
            ) -> tuple[Graph, Var]:
    """Bind leaves on a fresh graph, call ``fn(graph, **leaves)``, return both.

    Tensors carry their own ``grad_required`` flag; raw arrays are treated as
    requiring gradients.
    """
    g = Graph()
    leaves = {}
    for name, val in leaf_bindings.items():
        req = val.grad_required if isinstance(val, Tensor) else True
        leaves[name] = g.leaf(name, val, requires_grad=req)
    return g, fn(g, **leaves)


def backward(graph: Graph, output: Var) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in graph.backward(output).items()}

