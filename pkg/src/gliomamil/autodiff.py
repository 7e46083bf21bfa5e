"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded trace in reverse
topological order. Broadcasting is limited to scalar operands; the one
row-broadcast needed by linear layers is the explicit :func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable trace recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError("tensor created with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; divide by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite output in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        ga = g if a.shape == g.shape else np.sum(g)
        gb = g if b.shape == g.shape else np.sum(g)
        return ga, gb

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd
        gb = g * ad
        if a.shape != ga.shape:
            ga = np.sum(ga)
        if b.shape != gb.shape:
            gb = np.sum(gb)
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., j] + b[j]``: the only non-scalar broadcast in the engine."""
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DegenerateInputError("log of non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------- structural


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g),), "sum")
    ax = axis % x.data.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.data.ndim != 2:
            raise DimensionError("transpose without axes needs a 2-D tensor")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    ref = tensors[0].data.ndim
    ax = axis % max(ref, 1)
    for t in tensors:
        if t.data.ndim != ref or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError("concat: incompatible shapes")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = tuple(tensors)
    if not tensors or any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError("stack: tensors must share a shape")
    return _make(np.stack([t.data for t in tensors]), tensors, lambda g: tuple(g), "stack")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or of 3-D stacks sharing a leading axis."""
    if a.data.ndim not in (2, 3) or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0:
        raise DimensionError("softmax of a scalar")
    ax = axis % x.data.ndim
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm: gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- losses


def mse(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = 2.0 * g * diff / n
        return ga, -ga

    return _make(np.array((diff * diff).mean()), (a, b), bw, "mse")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood under softmax(logits).

    1-D logits take an integer target; 2-D logits ``(B, k)`` take ``B``
    integer targets and return the batch mean.
    """
    if logits.data.ndim not in (1, 2):
        raise DimensionError("cross_entropy expects 1-D logits or a (B, k) batch")
    z2 = logits.data.reshape(-1, logits.shape[-1])
    tgt = np.asarray(target, dtype=np.int64).reshape(-1)
    k = z2.shape[1]
    if tgt.size != z2.shape[0]:
        raise DimensionError(f"cross_entropy: {z2.shape[0]} rows but {tgt.size} targets")
    if ((tgt < 0) | (tgt >= k)).any():
        raise ContractError(f"targets {tgt.tolist()} outside [0, {k})")
    z = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    p = np.exp(z - lse[:, None])
    rows = np.arange(z.shape[0])
    b = z.shape[0]

    def bw(g):
        grad = p.copy()
        grad[rows, tgt] -= 1.0
        return ((g / b) * grad.reshape(logits.shape),)

    return _make(np.array((lse - z[rows, tgt]).mean()), (logits,), bw, "cross_entropy")


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each vector along the last axis by its Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms == 0.0).any():
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    y = x.data / norms

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _make(y, (x,), bw, "normalize_rows")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: need equal 1-D shapes, got {u.shape}, {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    ud, vd = u.data, v.data
    c = float(ud @ vd) / (nu * nv)

    def bw(g):
        gu = g * (vd / (nu * nv) - c * ud / (nu * nu))
        gv = g * (ud / (nu * nv) - c * vd / (nv * nv))
        return gu, gv

    return _make(np.array(c), (u, v), bw, "cosine")


# ---------------------------------------------------------------- reverse pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned as a
    map keyed by leaf tensor. The trace is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                result[node] = g
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None
    return result


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
