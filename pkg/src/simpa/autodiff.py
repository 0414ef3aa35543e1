"""Reverse-mode automatic differentiation on dense float64 arrays.

Every backward rule is written in terms of ``Tensor`` operations, so a
gradient computed with ``create_graph=True`` is itself a differentiable
graph. That is what makes it possible to differentiate through an inner
gradient-descent step (gradient of a gradient) without a separate
forward-over-reverse engine.

Typical use::

    w = Tensor(np.ones(3), requires_grad=True)
    loss = (w * w).sum()
    (g,) = gradients(loss, [w])
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "as_tensor",
    "gradients",
    "concat",
    "sum_to",
    "Graph",
    "Node",
    "evaluate",
    "trace",
    "grad",
    "grad_through_update",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    """Context manager that stops graph recording (thread-local)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "_fn", "_parents", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._fn: Function | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

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
        return self._fn is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}{tag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    @property
    def mT(self):
        """Swap the last two axes."""
        return SwapLast.apply(self)

    def broadcast_to(self, shape):
        return BroadcastTo.apply(self, shape=tuple(shape))

    # -- elementwise maps -----------------------------------------------------
    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return Relu.apply(self)

    def softplus(self):
        return Softplus.apply(self)

    def log_sigmoid(self):
        # ln sigmoid(x) = -softplus(-x), overflow free
        return -Softplus.apply(-self)

    def log_softmax(self, axis: int = -1):
        return LogSoftmax.apply(self, axis=axis)

    def sqrt(self):
        return self ** 0.5

    def clip(self, lo: float = -np.inf, hi: float = np.inf):
        return Clip.apply(self, lo=lo, hi=hi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded operation. Subclasses implement ``forward`` on arrays and
    ``backward`` on Tensors (so backward itself can be recorded)."""

    inputs: tuple[Tensor, ...]
    _out: Callable[[], Tensor | None]

    def __init__(self, **kwargs):
        self.__dict__.update(kwargs)

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(a) for a in args)
        fn = cls(**kwargs)
        with np.errstate(all="ignore"):
            data = fn.forward(*(t.data for t in inputs))
        if not np.isfinite(data).all():
            shapes = ", ".join(str(t.shape) for t in inputs)
            raise NonFiniteError(f"non-finite value produced by {cls.__name__}({shapes})")
        out = Tensor(data)
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._fn = fn
            out._parents = inputs
            fn.inputs = inputs
            fn._out = weakref.ref(out)
        return out

    @property
    def output(self) -> Tensor:
        out = self._out()
        assert out is not None
        return out

    def forward(self, *arrays):  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: Tensor):  # pragma: no cover - abstract
        raise NotImplementedError


def sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    return SumTo.apply(g, shape=tuple(shape))


def _reduce_to(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = arr.ndim - len(shape)
    if lead:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr.reshape(shape)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-g * self.output / b, b.shape) if b.requires_grad else None
        return ga, gb


class PowScalar(Function):
    def forward(self, a):
        return a ** self.exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.exponent
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * p * a ** (p - 1.0),)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.output,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g):
        y = self.output
        return (g * (1.0 - y * y),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Sigmoid(Function):
    def forward(self, a):
        return _sigmoid(np.asarray(a))

    def backward(self, g):
        y = self.output
        return (g * y * (1.0 - y),)


class Relu(Function):
    def forward(self, a):
        self.mask = (a > 0).astype(np.float64)
        return a * self.mask

    def backward(self, g):
        return (g * self.mask,)


class Softplus(Function):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, g):
        return (g * Sigmoid.apply(self.inputs[0]),)


class Clip(Function):
    """Forward clamps; gradient passes only where the input lies in [lo, hi]."""

    def forward(self, a):
        self.mask = ((a >= self.lo) & (a <= self.hi)).astype(np.float64)
        return np.clip(a, self.lo, self.hi)

    def backward(self, g):
        return (g * self.mask,)


class LogSoftmax(Function):
    def forward(self, a):
        m = a.max(axis=self.axis, keepdims=True)
        s = a - m
        return s - np.log(np.exp(s).sum(axis=self.axis, keepdims=True))

    def backward(self, g):
        p = self.output.exp()
        return (g - p * g.sum(axis=self.axis, keepdims=True),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g @ b.mT, a.shape) if a.requires_grad else None
        gb = sum_to(a.mT @ g, b.shape) if b.requires_grad else None
        return ga, gb


class SwapLast(Function):
    def forward(self, a):
        return np.swapaxes(a, -1, -2)

    def backward(self, g):
        return (g.mT,)


class Sum(Function):
    def forward(self, a):
        return a.sum(axis=self.axis, keepdims=self.keepdims)

    def backward(self, g):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if np.isscalar(self.axis) else tuple(self.axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kshape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            g = g.reshape(kshape)
        elif self.axis is None and not self.keepdims:
            g = g.reshape((1,) * a.ndim)
        return (g.broadcast_to(a.shape),)


class SumTo(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return _reduce_to(a, self.shape)

    def backward(self, g):
        return (g.broadcast_to(self.in_shape),)


class BroadcastTo(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g):
        return (sum_to(g, self.in_shape),)


class Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class GetItem(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.array(a[self.index], dtype=np.float64)

    def backward(self, g):
        return (Scatter.apply(g, index=self.index, shape=self.in_shape),)


class Scatter(Function):
    """Adjoint of ``GetItem``: place values at ``index`` of a zero array."""

    def forward(self, a):
        out = np.zeros(self.shape)
        if _is_advanced(self.index):
            np.add.at(out, self.index, a)
        else:
            out[self.index] = a
        return out

    def backward(self, g):
        return (GetItem.apply(g, index=self.index),)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        outs, start = [], 0
        for n in self.sizes:
            idx = [slice(None)] * g.ndim
            idx[self.axis] = slice(start, start + n)
            outs.append(g[tuple(idx)])
            start += n
        return tuple(outs)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def _toposort(roots: Sequence[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(
    outputs: Tensor | Sequence[Tensor],
    inputs: Sequence[Tensor],
    grad_outputs: Tensor | np.ndarray | Sequence | None = None,
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian products of ``outputs`` with respect to ``inputs``.

    With no ``grad_outputs`` every output must be a scalar. When
    ``create_graph`` is true the returned gradients are themselves recorded
    and can be differentiated again.
    """
    outs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    if grad_outputs is None:
        for o in outs:
            if o.size != 1:
                raise ValueError(f"gradient of a non-scalar output {o.shape} needs grad_outputs")
        seeds = [Tensor(np.ones(o.shape)) for o in outs]
    else:
        gos = [grad_outputs] if isinstance(grad_outputs, (Tensor, np.ndarray)) else list(grad_outputs)
        seeds = [as_tensor(s) for s in gos]
    wanted = {id(t): i for i, t in enumerate(inputs)}
    result: list[Tensor | None] = [None] * len(inputs)
    grads: dict[int, Tensor] = {}
    for o, s in zip(outs, seeds):
        if not o.requires_grad:
            continue
        grads[id(o)] = grads[id(o)] + s if id(o) in grads else s

    with _grad_mode(create_graph):
        for node in reversed(_toposort(outs)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                result[wanted[id(node)]] = g
            if node._fn is None:
                continue
            for parent, pg in zip(node._parents, node._fn.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    final: list[Tensor] = []
    for t, g in zip(inputs, result):
        if g is None:
            if not allow_unused:
                raise ValueError(f"{t!r} is not part of the graph of the output")
            g = Tensor(np.zeros(t.shape))
        final.append(g)
    return final


# ---------------------------------------------------------------------------
# named-graph interface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    """One traced operation: kind, ids of input nodes, forward value."""

    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray


@dataclass
class Graph:
    """A computation ``fn(**bindings) -> Tensor`` over named inputs.

    ``params`` names the bindings gradients can be taken with respect to;
    everything else is treated as data.
    """

    fn: Callable[..., Tensor]
    params: tuple[str, ...] = ()
    inputs: tuple[str, ...] = field(default_factory=tuple)

    def build(self, bindings: Mapping[str, object], param_tensors: Mapping[str, Tensor] | None = None):
        missing = [n for n in (*self.params, *self.inputs) if n not in bindings and not (param_tensors and n in param_tensors)]
        if missing:
            raise KeyError(f"unbound graph inputs: {missing}")
        args = {}
        leaves = {}
        for name, value in bindings.items():
            if param_tensors and name in param_tensors:
                continue
            if name in self.params:
                leaves[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
                args[name] = leaves[name]
            else:
                args[name] = value if isinstance(value, Tensor) else Tensor(value, name=name)
        if param_tensors:
            args.update(param_tensors)
            leaves.update(param_tensors)
        return self.fn(**args), leaves


def evaluate(graph: Graph, bindings: Mapping[str, object]) -> Tensor:
    """Forward value of ``graph`` under ``bindings``."""
    with no_grad():
        out, _ = graph.build(bindings)
    return out


def trace(graph: Graph, bindings: Mapping[str, object]) -> list[Node]:
    """Topologically ordered node records of one evaluation."""
    out, leaves = graph.build(bindings)
    order = _toposort([out]) if out.requires_grad else [out]
    ids = {id(t): i for i, t in enumerate(order)}
    nodes = []
    for i, t in enumerate(order):
        op = type(t._fn).__name__ if t._fn is not None else f"param:{t.name}"
        nodes.append(Node(i, op, tuple(ids[id(p)] for p in t._parents if id(p) in ids), t.data))
    return nodes


def grad(graph: Graph, bindings: Mapping[str, object], wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of a scalar graph output."""
    names = tuple(graph.params if wrt is None else wrt)
    unknown = [n for n in names if n not in graph.params]
    if unknown:
        raise KeyError(f"not parameters of this graph: {unknown}")
    out, leaves = graph.build(bindings)
    if out.size != 1:
        raise ValueError(f"output must be scalar, got shape {out.shape}")
    gs = gradients(out, [leaves[n] for n in names], allow_unused=True)
    return {n: g.data for n, g in zip(names, gs)}


def grad_through_update(
    outer: Graph,
    inner: Graph,
    step_size: float,
    bindings: Mapping[str, object],
    wrt: Iterable[str] | None = None,
    second_order: bool = True,
) -> dict[str, np.ndarray]:
    """d outer(lam) / d theta where lam = theta - step_size * grad inner(theta).

    In first-order mode the inner gradient is treated as a constant, so the
    Jacobian of ``lam`` with respect to ``theta`` is the identity.
    """
    names = tuple(inner.params if wrt is None else wrt)
    theta = {n: Tensor(np.array(bindings[n], dtype=np.float64), requires_grad=True, name=n) for n in names}
    inner_out, _ = inner.build(bindings, param_tensors=theta)
    if inner_out.size != 1:
        raise ValueError("inner loss must be scalar")
    g_inner = gradients(inner_out, [theta[n] for n in names], create_graph=second_order, allow_unused=True)
    lam = {n: theta[n] - step_size * (g if second_order else g.detach()) for n, g in zip(names, g_inner)}
    outer_out, _ = outer.build(bindings, param_tensors=lam)
    if outer_out.size != 1:
        raise ValueError("outer loss must be scalar")
    gs = gradients(outer_out, [theta[n] for n in names], allow_unused=True)
    return {n: g.data for n, g in zip(names, gs)}
