"""Dense tensors with eager reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding its inputs and
a closure that maps the output gradient to input gradients.  Node ids come
from a global counter, so creation order is a valid topological order and
:func:`backward` only has to sort the reachable nodes by id.

Two precisions are supported: ``"f64"`` (default, required for gradient
checks) and ``"f32"``.  The active precision decides the dtype of newly
created tensors.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DomainError, NumericError, ShapeError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64
_local = threading.local()
_node_ids = itertools.count()


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_precision() -> str:
    return "f64" if _dtype is np.float64 else "f32"


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


class KinkMonitor:
    """Smallest distance to a non-differentiable point seen while active.

    relu contributes ``min |x|``; max reductions contribute the gap between
    the largest and second-largest finite entries along the reduced axis
    (exact ties are skipped).
    """

    def __init__(self):
        self.margin = np.inf

    def note(self, value) -> None:
        self.margin = min(self.margin, float(value))


@contextlib.contextmanager
def kink_monitor():
    old = getattr(_local, "kinks", None)
    mon = _local.kinks = KinkMonitor()
    try:
        yield mon
    finally:
        _local.kinks = old


def _max_gap(x: np.ndarray, axis) -> float:
    flat = x.reshape(-1, 1) if axis is None else np.moveaxis(x, axis, -1)
    if flat.shape[-1] < 2:
        return np.inf
    top2 = -np.sort(-np.where(np.isfinite(flat), flat, -np.inf), axis=-1)[..., :2]
    gap = top2[..., 0] - top2[..., 1]
    # exact ties only arise from saturated entries (e.g. several relu zeros), which move together
    gap = gap[np.isfinite(gap) & (gap > 0)]
    return float(gap.min()) if gap.size else np.inf


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    old = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = old


class Node:
    """One entry of the computation graph."""

    __slots__ = ("id", "kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 1000

    def __add__(self, other):
        return ew_binary("add", self, other)

    def __radd__(self, other):
        return ew_binary("add", _wrap(other), self)

    def __sub__(self, other):
        return ew_binary("sub", self, other)

    def __rsub__(self, other):
        return ew_binary("sub", _wrap(other), self)

    def __mul__(self, other):
        return ew_binary("mul", self, other)

    def __rmul__(self, other):
        return ew_binary("mul", _wrap(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return ew_binary("mul", self, power(other, -1.0))
        return ew_binary("mul", self, 1.0 / other)

    def __neg__(self):
        return ew_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=_dtype)
    t.grad = None
    t.requires_grad = False
    t.node = None
    t.name = None
    return t


def _result(data: np.ndarray, kind: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out.node = Node(kind, inputs, backward_fn) if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with leading batch axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), backward)


# --- elementwise --------------------------------------------------------------


def ew_binary(kind: str, a, b) -> Tensor:
    """Elementwise add/sub/mul.  Shapes must broadcast (a scalar always does)."""
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc
    if kind == "add":
        out = a.data + b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif kind == "sub":
        out = a.data - b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif kind == "mul":
        out = a.data * b.data

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

    else:
        raise ContractError(f"unknown binary op {kind!r}")
    return _result(out, kind, (a, b), backward)


def add(a, b) -> Tensor:
    return ew_binary("add", a, b)


def sub(a, b) -> Tensor:
    return ew_binary("sub", a, b)


def mul(a, b) -> Tensor:
    return ew_binary("mul", a, b)


def ew_unary(kind: str, a) -> Tensor:
    a = _wrap(a)
    x = a.data
    if kind == "sigmoid":
        out = expit(x)

        def backward(g):
            return (g * out * (1.0 - out),)

    elif kind == "tanh":
        out = np.tanh(x)

        def backward(g):
            return (g * (1.0 - out * out),)

    elif kind == "relu":
        out = np.maximum(x, 0.0)
        mon = getattr(_local, "kinks", None)
        if mon is not None and x.size:
            mon.note(np.abs(x).min())

        def backward(g):
            return (g * (x > 0),)

    elif kind == "exp":
        out = np.exp(x)

        def backward(g):
            return (g * out,)

    elif kind == "log":
        bad = np.argwhere(~(x > 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"log of non-positive entry {x[idx]!r} at index {idx}")
        out = np.log(x)

        def backward(g):
            return (g / x,)

    elif kind == "neg":
        out = -x

        def backward(g):
            return (-g,)

    elif kind == "square":
        out = x * x

        def backward(g):
            return (2.0 * g * x,)

    else:
        raise ContractError(f"unknown unary op {kind!r}")
    return _result(out, kind, (a,), backward)


def sigmoid(a) -> Tensor:
    return ew_unary("sigmoid", a)


def tanh(a) -> Tensor:
    return ew_unary("tanh", a)


def relu(a) -> Tensor:
    return ew_unary("relu", a)


def exp(a) -> Tensor:
    return ew_unary("exp", a)


def log(a) -> Tensor:
    return ew_unary("log", a)


def square(a) -> Tensor:
    return ew_unary("square", a)


def power(a, p: float) -> Tensor:
    """``a ** p`` for a scalar exponent."""
    a = _wrap(a)
    out = np.power(a.data, p)

    def backward(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _result(out, "power", (a,), backward)


# --- structural ---------------------------------------------------------------


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty list")
    ndim = parts[0].ndim
    ax = axis % ndim if ndim else 0
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[q.shape for q in parts]} disagree off-axis"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(out, "concat", tuple(parts), backward)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[p.shape for p in parts]}")
    out = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, "stack", tuple(parts), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, "reshape", (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(out, "transpose", (a,), backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, "getitem", (a,), backward)


# --- reductions and normalisers ----------------------------------------------


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    x = a.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ContractError(f"reduce: axis {axis} invalid for shape {x.shape}")
        if x.shape[axis] == 0:
            raise DomainError(f"{kind} over empty axis {axis} of shape {x.shape}")
    elif x.size == 0:
        raise DomainError(f"{kind} over an empty tensor")

    def expand(g):
        if axis is None:
            return np.broadcast_to(np.reshape(g, (1,) * x.ndim), x.shape)
        return np.broadcast_to(g if keepdims else np.expand_dims(g, axis), x.shape)

    if kind == "sum":
        out = x.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            return (np.array(expand(g)),)

    elif kind == "mean":
        out = x.mean(axis=axis, keepdims=keepdims)
        n = x.size if axis is None else x.shape[axis]

        def backward(g):
            return (expand(g) / n,)

    elif kind == "max":
        out = x.max(axis=axis, keepdims=keepdims)
        mon = getattr(_local, "kinks", None)
        if mon is not None:
            mon.note(_max_gap(x, axis))

        def backward(g):
            # np.argmax returns the first maximal index, so ties go to the lowest index
            mask = np.zeros_like(x)
            if axis is None:
                mask.reshape(-1)[np.argmax(x)] = 1.0
            else:
                np.put_along_axis(mask, np.expand_dims(np.argmax(x, axis=axis), axis), 1.0, axis=axis)
            return (mask * expand(g),)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return _result(np.asarray(out), kind, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("log_softmax: NaN in input")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (a,), backward)


# --- gradient propagation -----------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient (unless they already hold one).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = []
        seen = set()
        stack_ = [loss]
        while stack_:
            t = stack_.pop()
            if t.node is None or t.node.id in seen:
                continue
            seen.add(t.node.id)
            order.append(t)
            stack_.extend(t.node.inputs)
        order.sort(key=lambda t: t.node.id, reverse=True)

        pending = {id(loss): np.ones_like(loss.data)}
        if loss.node is None:
            order = []
            _accumulate(loss, pending[id(loss)])
        for t in order:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    _accumulate(inp, gi)
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar output from the current values of
    ``params``.  With ``max_coords`` set, that many coordinates per parameter
    are sampled (seeded) instead of checking all of them.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps {eps} outside [1e-6, 1e-3]")
    if any(p.data.dtype != np.float64 for p in params):
        raise ContractError("grad_check requires 64-bit parameters")
    for p in params:
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad.reshape(-1)
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ContractError("grad_check needs contiguous parameter storage")
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for j in coords:
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(fn().data.reshape(-1)[0])
                flat[j] = orig - eps
                fm = float(fn().data.reshape(-1)[0])
                flat[j] = orig
                num = (fp - fm) / (2.0 * eps)
                an = float(analytic[j])
                err = abs(an - num) / max(abs(an), abs(num), 1e-8)
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
