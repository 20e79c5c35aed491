"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when it takes part in a
computation, remembers its parents and a rule that maps the output gradient
to parent gradients. ``backward`` walks the graph in reverse topological order
and accumulates gradients into leaf tensors (``grad += ...``); callers zero
gradients explicitly between optimizer steps.

``log`` clamps its input at ``LOG_EPS`` so that vanishing standard deviations
early in training never produce ``-inf``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{tag})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log of ``max(a, LOG_EPS)``; the gradient is zero where clamped."""
    a = as_tensor(a)
    safe = np.maximum(a.data, LOG_EPS)
    live = a.data >= LOG_EPS
    return _make(np.log(safe), (a,), "log", lambda g: (g * live / safe,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), "sum", bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(t.data.ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", bw)


def slice_(a, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), "slice", bw)


def take_rows(a, rows) -> Tensor:
    """Gather rows of a 2-D tensor (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.intp)
    return slice_(a, (rows,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    soft = np.exp(a.data - out)
    out = np.squeeze(out, axis=axis)
    return _make(out, (a,), "logsumexp",
                 lambda g: (np.expand_dims(g, axis) * soft,))


def grl(a, lambda_d: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lambda_d`` times the gradient backward."""
    a = as_tensor(a)
    return _make(a.data.copy(), (a,), "grl", lambda g: (-lambda_d * g,))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "clip": clip,
    "sum": sum,
    "mean": mean,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "transpose": transpose,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
    "grl": grl,
}


def forward(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply ``op_kind`` by name, e.g. ``forward("scale", [x], c=2.0)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``."""
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    xf = x.data.reshape(-1)
    for i in range(xf.size):
        xf[i] = base.reshape(-1)[i] + eps
        hi = float(f(x).data)
        xf[i] = base.reshape(-1)[i] - eps
        lo = float(f(x).data)
        xf[i] = base.reshape(-1)[i]
        flat[i] = (hi - lo) / (2 * eps)
    x.data[...] = base
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``x`` must be a leaf
    that requires grad; its ``grad`` buffer is overwritten.
    """
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    x.grad = np.zeros_like(x.data)
    backward(f(x))
    analytic = x.grad.copy()
    numeric = numeric_grad(f, x, eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
