"""Dense float64 tensors with reverse-mode gradient accumulation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. :func:`backward` sorts
the recorded operations topologically (a :class:`Graph`) and runs the closures
in reverse, so a graph is rebuilt from scratch on every forward pass.

Shapes are explicit. The only implicit broadcast is a 0-d tensor (a scalar
parameter) combined with a tensor of any shape in :func:`add` and :func:`mul`.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation."""


class DeterminismError(RuntimeError):
    """Raised by :func:`grad_check` when the function is not repeatable."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # thin operator sugar over the functional API
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


_state = threading.local()


@contextmanager
def no_grad():
    """Within this block operations record nothing (evaluation passes)."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = not getattr(_state, "disabled", False) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------------------
# graph


class Graph:
    """Operations reachable from an output, in topological order.

    ``nodes[i]`` never depends on ``nodes[j]`` for ``j > i``; each node appears
    once, so a reverse sweep visits every operation exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion depth would blow up on long CTC chains
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(out: Tensor, grad: np.ndarray | None = None) -> Graph:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not out.requires_grad:
        return Graph([])
    if grad is None:
        if out.data.size != 1:
            raise ShapeError(f"backward: implicit gradient needs a scalar output, got {list(out.shape)}")
        grad = np.ones_like(out.data)
    graph = Graph.from_output(out)
    for node in graph.nodes:
        if node._backward is not None:
            node.grad = None
    out.grad = np.array(grad, dtype=np.float64).reshape(out.shape)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim == 0 and a.ndim > 0:
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g.sum())
        return _result(a.data + b.data, (a, b), bw, "add_scalar")
    if a.ndim == 0 and b.ndim > 0:
        return add(b, a)
    _require_same_shape("add", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim == 0 and a.ndim > 0:
        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, np.sum(g * a.data))
        return _result(a.data * b.data, (a, b), bw, "mul_scalar")
    if a.ndim == 0 and b.ndim > 0:
        return mul(b, a)
    _require_same_shape("mul", a, b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)
    return _result(a.data * c, (a,), bw, "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` of length ``x.shape[-1]`` to every row of ``x``."""
    if b.ndim != 1 or x.ndim == 0 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {list(b.shape)} along last axis of {list(x.shape)}")
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=axes))
    return _result(x.data + b.data, (x, b), bw, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)
    return _result(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bw(g):
        _accumulate(x, g * y * (1.0 - y))
    return _result(y, (x,), bw, "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * y)
    return _result(y, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        y = np.log(x.data)

    def bw(g):
        _accumulate(x, g / x.data)
    return _result(y, (x,), bw, "log")


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, 2.0 * g * x.data)
    return _result(x.data * x.data, (x,), bw, "square")


# ---------------------------------------------------------------------------
# shape and reductions


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))
    return _result(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, full)
    return _result(y, (x,), bw, "max")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {list(x.shape)}")

    def bw(g):
        _accumulate(x, g.T)
    return _result(x.data.T.copy(), (x,), bw, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")

    def bw(g):
        _accumulate(x, g.reshape(x.shape))
    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {other} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(xs, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)
    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    return concat([reshape(t, (1,) + t.shape) for t in xs], axis=0)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather along the first axis; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)
    return _result(x.data[index], (x,), bw, "take_rows")


def repeat_row(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a vector into an ``n x len(x)`` matrix."""
    if x.ndim != 1:
        raise ShapeError(f"repeat_row: expected a vector, got {list(x.shape)}")

    def bw(g):
        _accumulate(x, g.sum(axis=0))
    return _result(np.tile(x.data, (n, 1)), (x,), bw, "repeat_row")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)
    return _result(a.data @ b.data, (a, b), bw, "matmul")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product of matching rows: ``(M, F), (M, F) -> (M,)``."""
    return reduce_sum(mul(a, b), axis=-1)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _result(y, (x,), bw, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(y)

    def bw(g):
        _accumulate(x, g - sm * g.sum(axis=-1, keepdims=True))
    return _result(y, (x,), bw, "log_softmax")


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize along the last axis; rows with norm <= eps pass through unchanged."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = norm > eps
    safe = np.where(live, norm, 1.0)
    y = np.where(live, x.data / safe, x.data)

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, np.where(live, (g - y * proj) / safe, g))
    return _result(y, (x,), bw, "normalize")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Same-length dilated 1-D convolution over the time axis.

    ``x`` is ``(N, T, C_in)``, ``w`` is ``(C_in, C_out, k)`` with odd ``k``;
    taps sit at offsets ``(j - k // 2) * dilation`` and out-of-range frames read
    as zero (symmetric padding, non-causal).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ShapeError(f"conv1d: input {list(x.shape)} does not match weights {list(w.shape)}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"conv1d: bias {list(b.shape)} does not match {w.shape[1]} output channels")
    n, t, cin = x.shape
    cout = w.shape[1]
    pad = (k // 2) * dilation
    xp = np.zeros((n, t + 2 * pad, cin))
    xp[:, pad:pad + t] = x.data
    # columns (N, T, k, C_in) -> one GEMM against (k*C_in, C_out)
    cols = np.stack([xp[:, j * dilation:j * dilation + t] for j in range(k)], axis=2)
    wmat = w.data.transpose(2, 0, 1).reshape(k * cin, cout)
    y = cols.reshape(n * t, k * cin) @ wmat
    y = y.reshape(n, t, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(n * t, cout)
        if w.requires_grad:
            gw = cols.reshape(n * t, k * cin).T @ g2
            _accumulate(w, gw.reshape(k, cin, cout).transpose(1, 2, 0))
        if b is not None:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, t, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j * dilation:j * dilation + t] += gcols[:, :, j]
            _accumulate(x, gxp[:, pad:pad + t])
    return _result(y, parents, bw, "conv1d")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between accumulated and central-difference gradients.

    ``f`` must rebuild its graph on each call and return a scalar tensor. The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    base = out.item()
    if f().item() != base:
        raise DeterminismError("grad_check: two baseline evaluations differ")
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if math.isnan(err):
                return math.inf
            worst = max(worst, err)
    return worst


def grad_check_groups(f: Callable[[], Tensor], groups: dict[str, list[Tensor]], eps: float = 1e-6) -> dict[str, float]:
    """:func:`grad_check` per named parameter group."""
    return {name: grad_check(f, ps, eps) for name, ps in groups.items()}
