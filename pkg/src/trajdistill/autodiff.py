"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every operation records its parents together with a vector-Jacobian product
written in terms of other ``Tensor`` operations.  Running the backward sweep
with ``create_graph=True`` therefore records a new graph, which makes
gradients of gradients available (needed for the gradient penalty and for
meta-gradients through unrolled SGD).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "grad",
    "finite_diff",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "conv2d",
    "instance_norm",
    "relu",
    "avg_pool2d",
    "softmax",
    "log_softmax",
    "logsumexp",
    "cross_entropy",
    "l2_norm",
    "squared_distance",
    "pad2d",
    "concat",
]

_ids = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised for misuse of the differentiation graph."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation receives or produces a NaN or infinity."""

    def __init__(self, op: str, where: str = "input"):
        super().__init__(f"{op}: non-finite {where}")
        self.op = op


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(op: str, arr: np.ndarray, where: str = "input") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, where)


class Tensor:
    """An immutable float64 array that is also a node of the autodiff graph."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "op", "id", "_parents", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite("tensor", arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple = ()
        self._consumed = False

    # construction -----------------------------------------------------------

    @classmethod
    def _from_op(cls, op: str, data: np.ndarray, parents) -> "Tensor":
        """Wrap an op result; ``parents`` is a sequence of (Tensor, vjp)."""
        data = np.asarray(data, dtype=np.float64)
        _check_finite(op, data, "output")
        out = cls.__new__(cls)
        data.flags.writeable = False
        out.data = data
        out.op = op
        out.id = next(_ids)
        out._consumed = False
        if _grad_enabled:
            live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        else:
            live = ()
        out._parents = live
        out.requires_grad = bool(live)
        return out

    # numpy-ish surface --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    # methods -----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# broadcasting helpers (each is itself a differentiable op)


def _sum_to_shape(arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    if lead:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr.reshape(shape)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return Tensor._from_op(
        "sum_to", _sum_to_shape(x.data, shape), [(x, lambda g: broadcast_to(g, src))]
    )


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    return Tensor._from_op("broadcast_to", out, [(x, lambda g: sum_to(g, src))])


def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("add", a, b)
    return Tensor._from_op(
        "add",
        a.data + b.data,
        [(a, lambda g: sum_to(g, a.shape)), (b, lambda g: sum_to(g, b.shape))],
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op("neg", -a.data, [(a, lambda g: neg(g))])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("mul", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    return Tensor._from_op(
        "mul",
        out,
        [(a, lambda g: sum_to(g * b, a.shape)), (b, lambda g: sum_to(g * a, b.shape))],
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("div", "divisor (zero)")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data / b.data
    return Tensor._from_op(
        "div",
        out,
        [
            (a, lambda g: sum_to(g / b, a.shape)),
            (b, lambda g: sum_to(neg(g * a / (b * b)), b.shape)),
        ],
    )


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a python number")
    p = float(p)
    if p == 2.0:
        return mul(a, a)
    with np.errstate(all="ignore"):
        out = a.data**p
    return Tensor._from_op("pow", out, [(a, lambda g: g * (p * power(a, p - 1.0)))])


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def vjp(g):
        return g * out

    out = Tensor._from_op("exp", out_data, [(a, vjp)])
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log", "input (non-positive)")
    return Tensor._from_op("log", np.log(a.data), [(a, lambda g: g / a)])


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt", "input (negative)")

    def vjp(g):
        return g * 0.5 / out

    out = Tensor._from_op("sqrt", np.sqrt(a.data), [(a, vjp)])
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return Tensor._from_op("relu", a.data * mask, [(a, lambda g: g * Tensor(mask))])


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    src = a.shape
    return Tensor._from_op(
        "sum",
        a.data.sum(axis=axes, keepdims=keepdims),
        [(a, lambda g: broadcast_to(reshape(g, kept), src))],
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._from_op("reshape", out, [(a, lambda g: reshape(g, src))])


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        "transpose", a.data.transpose(axes), [(a, lambda g: transpose(g, inv))]
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc} for shape {src}") from None
    return Tensor._from_op(
        "getitem", np.array(out, copy=True), [(a, lambda g: scatter(g, index, src))]
    )


def scatter(g: Tensor, index, shape: tuple) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` into zeros of ``shape`` at ``index``."""
    out = np.zeros(shape)
    if _is_basic(index):
        out[index] = g.data
    else:
        np.add.at(out, index, g.data)
    return Tensor._from_op("scatter", out, [(g, lambda gg: getitem(gg, index))])


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    inner = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
    return Tensor._from_op(
        "pad2d", np.pad(x.data, widths), [(x, lambda g: getitem(g, inner))]
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    parents = []
    start = 0
    for t in tensors:
        stop = start + t.shape[ax]
        index = (slice(None),) * ax + (slice(start, stop),)
        parents.append((t, lambda g, index=index: getitem(g, index)))
        start = stop
    return Tensor._from_op("concat", out, parents)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a.data, b.data)
    return Tensor._from_op(
        "matmul",
        out,
        [
            (a, lambda g: sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape)),
            (b, lambda g: sum_to(matmul(swapaxes(a, -1, -2), g), b.shape)),
        ],
    )


_IM2COL_CACHE: dict = {}


def _im2col_index(c: int, hp: int, wp: int, k: int) -> np.ndarray:
    key = (c, hp, wp, k)
    idx = _IM2COL_CACHE.get(key)
    if idx is None:
        ho, wo = hp - k + 1, wp - k + 1
        ch, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oi.reshape(-1, 1) + di.reshape(1, -1)
        cols = oj.reshape(-1, 1) + dj.reshape(1, -1)
        idx = ch.reshape(1, -1) * hp * wp + rows * wp + cols
        _IM2COL_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    xp = pad2d(x, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    idx = _im2col_index(c, hp, wp, k)
    cols = getitem(reshape(xp, (n, c * hp * wp)), (slice(None), idx))
    out = matmul(cols, transpose(reshape(weight, (o, c * k * k))))
    out = reshape(transpose(out, (0, 2, 1)), (n, o, ho, wo))
    if bias is not None:
        out = out + reshape(bias, (1, o, 1, 1))
    return out


# ---------------------------------------------------------------------------
# network building blocks


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected [N,C,H,W], got {x.shape}")
    centered = x - mean(x, axis=(2, 3), keepdims=True)
    var = mean(centered * centered, axis=(2, 3), keepdims=True)
    out = centered / sqrt(var + eps)
    c = x.shape[1]
    if gamma is not None:
        out = out * reshape(gamma, (1, c, 1, 1))
    if beta is not None:
        out = out + reshape(beta, (1, c, 1, 1))
    return out


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial size {(h, w)} not divisible by {k}")
    return mean(reshape(x, (n, c, h // k, k, w // k, k)), axis=(3, 5))


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    # the shift is a constant, so the identity lse(x) = m + lse(x - m) keeps derivatives exact
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    out = log(tsum(exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = reshape(out, tuple(s for i, s in enumerate(out.shape) if i != axis % x.ndim))
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; ``reduction`` is ``mean``, ``sum`` or ``none``."""
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [N,C], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    target = Tensor(one_hot(labels, logits.shape[1]))
    per_sample = neg(tsum(log_softmax(logits) * target, axis=1))
    if reduction == "none":
        return per_sample
    if reduction == "sum":
        return tsum(per_sample)
    return mean(per_sample)


def l2_norm(x: Tensor) -> Tensor:
    return sqrt(tsum(x * x))


def squared_distance(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_distance: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return tsum(d * d)


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        if node._consumed:
            raise GraphError(
                f"graph through node {node.id} ({node.op}) was already differentiated; "
                "pass retain_graph=True or create_graph=True to reuse it"
            )
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor], create_graph: bool = False,
         retain_graph: bool | None = None) -> list:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned tensors carry their own graph and can
    be differentiated again.  Unless the graph is retained, the nodes visited
    here are released and a second call through them raises ``GraphError``.
    """
    wrt = list(wrt)
    if loss.size != 1:
        raise GraphError(f"grad: loss must be scalar, got shape {loss.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    results = {t.id: None for t in wrt}
    if not loss.requires_grad:
        return [Tensor(np.zeros(t.shape)) for t in wrt]

    order = _topo_order(loss)
    grads: dict = {loss.id: Tensor(np.ones(loss.shape))}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in results:
                results[node.id] = g
            for parent, vjp in node._parents:
                pg = vjp(g)
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else add(prev, pg)
    if not retain_graph:
        for node in order:
            if node._parents:
                node._parents = ()
                node._consumed = True
    out = []
    for t in wrt:
        g = results[t.id]
        out.append(Tensor(np.zeros(t.shape)) if g is None else g)
    return out


def finite_diff(loss_fn: Callable[[np.ndarray], float], at, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    if eps <= 0:
        raise ValueError("finite_diff: eps must be positive")
    x = np.array(at, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(loss_fn(x))
        flat[i] = orig - eps
        fm = float(loss_fn(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def rel_error(a, b) -> float:
    """Relative error ``|a-b| / max(|a|, |b|)`` in the 2-norm, 0 when both vanish."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
