"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable op builds its output through :func:`_node`, which records
the parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
Graphs are per-object, so separate model replicas may run on separate threads.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _checks_enabled() -> bool:
    return getattr(_state, "finite_checks", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-op NaN/Inf guard on the current thread."""
    prev = _checks_enabled()
    _state.finite_checks = enabled
    try:
        yield
    finally:
        _state.finite_checks = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf.

        Without an explicit seed gradient the tensor must hold one element.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ValueError("seed gradient shape mismatch")
        tape = Tape.from_output(self)
        tape.run(self, grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Reverse-topological schedule for one backward pass.

    ``nodes`` lists every recorded node reachable from the output in execution
    order; ``run`` visits each exactly once in reverse.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _checks_enabled() and data.size and not math.isfinite(float(np.add.reduce(data, axis=None))):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (unbroadcast(np.where(mask, g, 0.0), sa),
                                         unbroadcast(np.where(mask, 0.0, g), sb)), "where")


# -- reductions and shape ops ----------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, orig),),
                 "broadcast")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def take_rows(a, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along axis 0 for a 2-D ``a``; backward scatters with summation."""
    a = as_tensor(a)
    n = a.shape[0]
    idx = np.asarray(idx)
    flat = idx.reshape(-1)

    def bw(g):
        g2 = g.reshape(flat.size, -1)
        full = np.zeros((n, g2.shape[1]), dtype=DTYPE)
        np.add.at(full, flat, g2)
        return (full.reshape(a.shape),)

    return _node(a.data[idx], (a,), bw, "take_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes (a may be batched, b 2-D or batched)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


def parameters_grad_vector(params: Iterable[Tensor]) -> np.ndarray:
    """Flatten the gradients of ``params`` (zeros where absent)."""
    return np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params
    ])
