"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the upstream gradient to one gradient per parent. ``backward`` walks the
graph once in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """A precondition of the engine was violated."""


Array = np.ndarray
BackwardFn = Callable[[Array], Sequence["Array | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: BackwardFn | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple, backward: BackwardFn, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward, op)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: Array, t: Tensor) -> Array:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a) if a.requires_grad else None,
                            _unbroadcast(g * ad, b) if b.requires_grad else None),
                 "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, square."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "square": square}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]: the one row-broadcast the engine allows."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} differ")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b),
                 lambda g: (g, g.sum(axis=lead) if b.requires_grad else None), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul of [B, m, k] by [B, k, n]."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.transpose(0, 2, 1) if a.requires_grad else None,
                            ad.transpose(0, 2, 1) @ g if b.requires_grad else None),
                 "bmm")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = a.data.sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _make(out, (a,), back, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _make(np.asarray(a.data.sum() / n), (a,),
                 lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, key) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return _make(a.data[key], (a,), back, "index")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather weight[ids]; ids may be any integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)
    return _make(weight.data[ids], (weight,), back, "embedding")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.data.ndim - 1))

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}, {bias.shape} vs width {d}")
    return _make(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


def softmax(x: Tensor, mask: Array | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get zero weight."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return _make(p, (x,), back, "softmax")


def log_softmax_np(z: Array) -> Array:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions selected by ``mask``.

    ``logits`` is [n, V]; ``targets`` and ``mask`` have length n.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} rows but targets {targets.shape}, "
                             f"mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("softmax_cross_entropy: mask selects no positions")
    sel = np.flatnonzero(mask)
    tsel = targets[sel]
    if tsel.size and (tsel.min() < 0 or tsel.max() >= v):
        raise ContractError(f"softmax_cross_entropy: target outside [0, {v})")
    logp = log_softmax_np(logits.data[sel])
    loss = -logp[np.arange(count), tsel].sum() / count

    def back(g):
        grad = np.zeros((n, v))
        p = np.exp(logp)
        p[np.arange(count), tsel] -= 1.0
        grad[sel] = p * (float(g) / count)
        return (grad,)
    return _make(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def _topo(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``root``.

    Gradients accumulate into existing ``.grad`` arrays across calls.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, Array] = {id(root): np.ones(root.shape)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node))
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


Tensor.backward = backward  # type: ignore[attr-defined]
