"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation is recorded as a node whose backward rule is
itself written in terms of differentiable operations.  Running ``backward``
with ``create_graph=True`` therefore produces gradients that are graph nodes,
and differentiating them again yields mixed second derivatives such as
d/dtheta [grad_y E(x, y)], which unrolled energy-descent training needs.

All arithmetic is float64.  Any operation that produces NaN or Inf raises
:class:`NonFiniteError` naming the operation.
"""
from __future__ import annotations

import itertools
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "NonFiniteError", "tensor", "constant", "parameter",
    "no_grad", "is_grad_enabled", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "scale", "square", "matmul",
    "transpose", "reshape", "broadcast_to", "sum_to", "concat", "sum", "mean",
    "relu", "sigmoid", "swish", "gather", "segment_sum", "register_backward",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_node_ids = itertools.count()
_grad_enabled = True


class Graph:
    """Recording context for tensors that participate in differentiation.

    Node ids come from one process-wide counter, so ordering by id is a
    topological order: a node's inputs always exist before it does.  The graph
    holds only weak references, so ``live`` is the number of recorded nodes
    still reachable from user code and ``peak`` is its high-water mark.
    """

    _stack: list["Graph"] = []

    def __init__(self):
        self.size = 0
        self.peak = 0
        self._live: weakref.WeakSet = weakref.WeakSet()

    @property
    def live(self) -> int:
        return len(self._live)

    def _record(self, t: "Tensor") -> None:
        t.node_id = next(_node_ids)
        self.size += 1
        self._live.add(t)
        n = len(self._live)
        if n > self.peak:
            self.peak = n

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()

    @staticmethod
    def current() -> "Graph":
        return Graph._stack[-1] if Graph._stack else _default_graph


_default_graph = Graph()


@contextmanager
def no_grad():
    """Disable recording; results are plain constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node_id", "op", "parents", "ctx", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: dict = {}
        if requires_grad:
            Graph.current()._record(self)

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else (", leaf" if self.requires_grad else "")
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def _bad_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# op registry
# --------------------------------------------------------------------------

BackwardRule = Callable[[Tensor, Tensor], Sequence["Tensor | None"]]
_BACKWARD: dict[str, BackwardRule] = {}


def register_backward(op: str):
    """Register ``rule(out, grad_out) -> grads per parent`` for ``op``.

    Rules must build their results from differentiable ops so that gradients
    computed under ``create_graph`` can themselves be differentiated.
    """
    def deco(fn: BackwardRule) -> BackwardRule:
        _BACKWARD[op] = fn
        return fn
    return deco


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], **ctx) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite result in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = None
    out.op = None
    out.parents = ()
    out.ctx = {}
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out.ctx = ctx
        Graph.current()._record(out)
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return _make("add", a.data + b.data, (a, b))


@register_backward("add")
def _add_bw(out, g):
    a, b = out.parents
    return sum_to(g, a.shape), sum_to(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return _make("sub", a.data - b.data, (a, b))


@register_backward("sub")
def _sub_bw(out, g):
    a, b = out.parents
    return sum_to(g, a.shape), sum_to(neg(g), b.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return _make("mul", a.data * b.data, (a, b))


@register_backward("mul")
def _mul_bw(out, g):
    a, b = out.parents
    ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _make("div", data, (a, b))


@register_backward("div")
def _div_bw(out, g):
    a, b = out.parents
    ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(neg(div(mul(g, a), square(b))), b.shape) if b.requires_grad else None
    return ga, gb


# ---- elementwise unary ----------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,))


@register_backward("neg")
def _neg_bw(out, g):
    return (neg(g),)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    return _make("scale", a.data * float(c), (a,), c=float(c))


@register_backward("scale")
def _scale_bw(out, g):
    return (scale(g, out.ctx["c"]),)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make("square", a.data * a.data, (a,))


@register_backward("square")
def _square_bw(out, g):
    (a,) = out.parents
    return (scale(mul(g, a), 2.0),)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,))


@register_backward("relu")
def _relu_bw(out, g):
    (a,) = out.parents
    # the step function has zero derivative almost everywhere; treat as constant
    return (mul(g, Tensor((a.data > 0).astype(np.float64))),)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    return _make("sigmoid", _sigmoid_np(a.data), (a,))


@register_backward("sigmoid")
def _sigmoid_bw(out, g):
    (a,) = out.parents
    s = sigmoid(a)
    return (mul(g, mul(s, sub(1.0, s))),)


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    return _make("swish", a.data * _sigmoid_np(a.data), (a,))


@register_backward("swish")
def _swish_bw(out, g):
    (a,) = out.parents
    s = sigmoid(a)
    # d/dx x*s(x) = s + x*s*(1-s)
    d = add(s, mul(mul(a, s), sub(1.0, s)))
    return (mul(g, d),)


# ---- linear algebra / shape ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b))


@register_backward("matmul")
def _matmul_bw(out, g):
    a, b = out.parents
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make("transpose", a.data.T, (a,))


@register_backward("transpose")
def _transpose_bw(out, g):
    return (transpose(g),)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,))


@register_backward("reshape")
def _reshape_bw(out, g):
    (a,) = out.parents
    return (reshape(g, a.shape),)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make("broadcast_to", data, (a,))


@register_backward("broadcast_to")
def _broadcast_bw(out, g):
    (a,) = out.parents
    return (sum_to(g, a.shape),)


def _reduce_to(data: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = data.ndim - len(shape)
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    return data


def sum_to(a, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast_to)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make("sum_to", _reduce_to(a.data, shape), (a,))


@register_backward("sum_to")
def _sum_to_bw(out, g):
    (a,) = out.parents
    return (broadcast_to(g, a.shape),)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in ts]
    return _make("concat", data, ts, axis=axis, sizes=sizes)


@register_backward("concat")
def _concat_bw(out, g):
    axis, sizes = out.ctx["axis"], out.ctx["sizes"]
    grads, start = [], 0
    for p, n in zip(out.parents, sizes):
        grads.append(_slice(g, axis, start, start + n) if p.requires_grad else None)
        start += n
    return tuple(grads)


def _slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return _make("slice", a.data[tuple(idx)], (a,), axis=axis, start=start, stop=stop)


@register_backward("slice")
def _slice_bw(out, g):
    (a,) = out.parents
    axis, start, stop = out.ctx["axis"], out.ctx["start"], out.ctx["stop"]
    parts = []
    n = a.shape[axis]
    if start > 0:
        parts.append(np.zeros(_with_axis(a.shape, axis, start)))
    parts.append(g)
    if stop < n:
        parts.append(np.zeros(_with_axis(a.shape, axis, n - stop)))
    return (concat(parts, axis=axis) if len(parts) > 1 else g,)


def _with_axis(shape, axis, n):
    s = list(shape)
    s[axis] = n
    return tuple(s)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    return _slice(_as_tensor(a), axis, start, stop)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return _make("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
                 axis=axis, keepdims=keepdims)


@register_backward("sum")
def _sum_bw(out, g):
    (a,) = out.parents
    axis, keepdims = out.ctx["axis"], out.ctx["keepdims"]
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        shape = list(a.shape)
        for ax in axes:
            shape[ax % a.ndim] = 1
        g = reshape(g, tuple(shape))
    elif axis is None and not keepdims:
        g = reshape(g, (1,) * a.ndim)
    return (broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


# ---- indexing for message passing ------------------------------------------

def gather(a, index: np.ndarray) -> Tensor:
    """Rows ``a[index]`` along axis 0."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for {a.shape[0]} rows")
    return _make("gather", a.data[index], (a,), index=index, n=a.shape[0])


@register_backward("gather")
def _gather_bw(out, g):
    return (segment_sum(g, out.ctx["index"], out.ctx["n"]),)


def segment_sum(a, index: np.ndarray, n: int) -> Tensor:
    """``out[k] = sum of a[i] over i with index[i] == k``; output has n rows."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ValueError(f"segment_sum: {index.shape[0]} indices for {a.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"segment_sum: index out of range for {n} segments")
    data = np.zeros((n,) + a.shape[1:])
    np.add.at(data, index, a.data)
    return _make("segment_sum", data, (a,), index=index, n=n)


@register_backward("segment_sum")
def _segment_sum_bw(out, g):
    return (gather(g, out.ctx["index"]),)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def _topo_order(output: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [output]
    while stack:
        t = stack.pop()
        if not t.requires_grad or id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    return nodes


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
             allow_unused: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are recorded nodes, so they
    can be differentiated again.  Without it they are constants.
    Unreachable ``wrt`` tensors raise unless ``allow_unused`` (then zeros).
    """
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    order = _topo_order(output)
    reachable = {id(t) for t in order}
    for i, w in enumerate(wrt):
        if id(w) not in reachable and not allow_unused:
            raise ValueError(f"wrt[{i}] is not reachable from the output")

    # only nodes with a path down to some wrt tensor need gradients
    targets = {id(w) for w in wrt}
    relevant = set(targets)
    for node in reversed(order):
        if any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    with _grad_mode(create_graph):
        for node in order:
            if id(node) not in relevant:
                continue
            g = grads.get(id(node)) if id(node) in targets else grads.pop(id(node), None)
            if g is None or not any(id(p) in relevant for p in node.parents):
                continue
            rule = _BACKWARD[node.op]
            for p, gp in zip(node.parents, rule(node, g)):
                if gp is None or not p.requires_grad or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else add(prev, gp)

    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(Tensor(np.zeros_like(w.data)) if g is None else g)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` and
    central differences: |a - c| / (|a| + |c| + 1e-8) over coordinates."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    (analytic,) = backward(out, [x], allow_unused=True)
    analytic = analytic.data.reshape(-1)
    numeric = np.empty(x0.size)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy(); xp[i] += h
            xm = flat.copy(); xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite near coordinate {i}")
            numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0


def parameters_checksum(params: Iterable[Tensor]) -> str:
    import hashlib
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
