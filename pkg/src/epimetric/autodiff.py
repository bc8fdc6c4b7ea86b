"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is the web of ``Tensor`` nodes linked through their
parents; calling ``backward`` on a scalar loss topologically sorts that web
and accumulates gradients into every leaf with ``requires_grad``. All math is
64-bit; every op checks its output for NaN/Inf and raises instead of
propagating silently.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf from finite inputs."""


_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (evaluation paths); per-thread state."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in output")


class Tensor:
    """A dense row-major float64 array plus its place in the autodiff graph.

    Treat tensors as immutable once created; backward closures capture the
    forward values they need.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op="leaf", _backward=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; fills ``grad`` on requires_grad leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediates do not keep their gradients
        for node in order:
            if node._op != "leaf":
                node.grad = None

    # operator sugar used by losses/tests
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic topological order of the graph below ``root`` (iterative DFS)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Run the reverse sweep; if ``params`` given, return name -> gradient map."""
    loss.backward()
    if params is None:
        return {}
    return {name: p.grad for name, p in params.items() if p.requires_grad and p.grad is not None}


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, data)
    if any(p.requires_grad for p in parents) and _grad_enabled():
        return Tensor(data, requires_grad=True, _parents=parents, _op=op, _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over axes that were broadcast up from ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, "div", (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # relu'(0) = 0

    def bwd(g):
        x._accumulate(g * mask)

    return _make(out, "relu", (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        x._accumulate(g * out)

    return _make(out, "exp", (x,), bwd)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bwd(g):
        x._accumulate(g / x.data)

    return _make(out, "log", (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        # subgradient 0 at sqrt(0), same convention as relu'(0)
        denom = np.where(out > 0.0, 2.0 * out, np.inf)
        x._accumulate(g / denom)

    return _make(out, "sqrt", (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)  # zero gradient at the clamp boundary

    def bwd(g):
        x._accumulate(g * mask)

    return _make(out, "clamp", (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _make(out, "sum", (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def mean_over_time(x: Tensor, axis: int = -2) -> Tensor:
    """Average over one sequence axis (pooling across positions)."""
    return tmean(x, axis=axis)


def max_over_time(x: Tensor, axis: int = -2) -> Tensor:
    """Max over one sequence axis; ties route gradient to the first maximal index."""
    if x.shape[axis] == 0:
        raise ShapeError(f"max_over_time: empty axis {axis} in shape {x.shape}")
    out = x.data.max(axis=axis)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)  # argmax picks the first max

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        x._accumulate(gx)

    return _make(out, "max_over_time", (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, "reshape", (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def bwd(g):
        x._accumulate(np.transpose(g, inverse))

    return _make(out, "transpose", (x,), bwd)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, "concat", tuple(tensors), bwd)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra / neural primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(out, "matmul", (a, b), bwd)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up integer ``ids`` (any shape) in ``table`` (V, d) -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_gather: id out of range [0, {table.shape[0]}), got min {ids.min()} max {ids.max()}"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        table._accumulate(gt)

    return _make(out, "embedding_gather", (table,), bwd)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid 1-D convolution, stride 1.

    x: (..., L, C_in), kernel: (width, C_in, C_out), bias: (C_out,).
    Output (..., L - width + 1, C_out). Sequences shorter than the width are a
    caller error (upstream padding guarantees length).
    """
    width, c_in, c_out = kernel.shape
    length = x.shape[-2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in}")
    if length < width:
        raise ShapeError(f"conv1d: sequence length {length} shorter than kernel width {width}")
    pos = length - width + 1
    lead = x.shape[:-2]
    # im2col: one large GEMM instead of many thin batched ones
    windows = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=-2)  # (..., pos, c_in, width)
    cols = np.ascontiguousarray(np.swapaxes(windows, -1, -2)).reshape(-1, width * c_in)
    kmat = kernel.data.reshape(width * c_in, c_out)
    out = (cols @ kmat + bias.data).reshape(lead + (pos, c_out))

    def bwd(g):
        gflat = g.reshape(-1, c_out)
        if x.requires_grad:
            gcols = (gflat @ kmat.T).reshape(lead + (pos, width, c_in))
            gx = np.zeros_like(x.data)
            for i in range(width):
                gx[..., i : i + pos, :] += gcols[..., i, :]
            x._accumulate(gx)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ gflat).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))

    return _make(out, "conv1d", (x, kernel, bias), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate((g - dot) * out)

    return _make(out, "softmax", (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, "log_softmax", (x,), bwd)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no scale/shift here)."""
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def bwd(g):
        n = x.shape[-1]
        gsum = g.sum(axis=-1, keepdims=True)
        gdot = (g * xhat).sum(axis=-1, keepdims=True)
        x._accumulate(inv / n * (n * g - gsum - xhat * gdot))

    return _make(xhat, "layer_norm", (x,), bwd)


@dataclass
class BatchNormState:
    """Running statistics owned by one batch-norm site (mutated in train mode only)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    initialized: bool = False

    @classmethod
    def for_features(cls, n: int, momentum: float = 0.9) -> "BatchNormState":
        return cls(np.zeros(n), np.ones(n), momentum)


def batch_norm(x: Tensor, state: BatchNormState, mode: str, eps: float = 1e-5) -> Tensor:
    """Per-feature batch normalization over axis 0 of a (B, C) input (no scale/shift here)."""
    if x.ndim != 2:
        raise ShapeError(f"batch_norm: expected (B, C) input, got {x.shape}")
    if mode == "train":
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if state.initialized:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mean
            state.running_var = m * state.running_var + (1.0 - m) * var
        else:
            # first batch seeds the running state so early eval is sane
            state.running_mean = mean.copy()
            state.running_var = var.copy()
            state.initialized = True
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv

        def bwd(g):
            n = x.shape[0]
            gsum = g.sum(axis=0)
            gdot = (g * xhat).sum(axis=0)
            x._accumulate(inv / n * (n * g - gsum - xhat * gdot))

        return _make(xhat, "batch_norm", (x,), bwd)
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        out = (x.data - state.running_mean) * inv

        def bwd(g):
            x._accumulate(g * inv)

        return _make(out, "batch_norm", (x,), bwd)
    raise ValueError(f"batch_norm: unknown mode {mode!r}")


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode. Train mode needs a seeded rng."""
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if rng is None:
        raise ValueError("dropout: train mode requires an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep

    def bwd(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, "dropout", (x,), bwd)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes (batch dims lead)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: shapes q{q.shape} k{k.shape} v{v.shape} do not align")
    d_k = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = mul(matmul(q, transpose(k, axes)), Tensor(1.0 / math.sqrt(d_k)))
    return matmul(softmax(scores, axis=-1), v)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "embedding_gather": embedding_gather,
    "conv1d": conv1d,
    "relu": relu,
    "max_over_time": max_over_time,
    "mean_over_time": mean_over_time,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "scaled_dot_product_attention": scaled_dot_product_attention,
}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch one forward primitive by name (mainly for generic test drivers)."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}; known: {sorted(_PRIMITIVES)}")
    return _PRIMITIVES[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_coord: dict[str, np.ndarray] = field(default_factory=dict)


def grad_check(f, point, h: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``point`` is a dict name -> Tensor (requires_grad respected); relative
    error per coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if isinstance(point, Tensor):
        point = {"x": point}
    for p in point.values():
        p.grad = None
    out = f(point)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must be scalar-valued")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in point.items()
        if p.requires_grad
    }

    per_coord: dict[str, np.ndarray] = {}
    max_rel = 0.0
    for name, p in point.items():
        if not p.requires_grad:
            continue
        num = np.zeros_like(p.data)
        nflat = num.ravel()
        with no_grad():
            for i in range(p.data.size):
                orig = p.data.flat[i]
                p.data.flat[i] = orig + h
                hi = f(point).item()
                p.data.flat[i] = orig - h
                lo = f(point).item()
                p.data.flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NumericError(f"grad_check: non-finite f probing {name}[{i}]")
                nflat[i] = (hi - lo) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        rel = np.abs(a - num) / denom
        per_coord[name] = rel
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))
    return GradCheckReport(max_rel_err=max_rel, per_coord=per_coord)
