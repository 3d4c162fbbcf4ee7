"""Second-order forward-mode jets over the query coordinates (t, z, x).

A :class:`Jet2` packs value, gradient and a chosen set of Hessian entries into
one taped tensor of shape ``[K, *S]``: component 0 is the value, 1..3 are the
first partials in (t, z, x) order, and the rest are the second partials listed
in ``pairs``.  Because the packed tensor is an ordinary graph node, every jet
component stays differentiable with respect to network parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor, _node, as_tensor
from .layers import activation_derivs

AXES = ("t", "z", "x")
FULL_PAIRS: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
SPATIAL_DIAG: tuple[tuple[int, int], ...] = ((1, 1), (2, 2))


def _norm_pairs(pairs) -> tuple[tuple[int, int], ...]:
    out = []
    for i, j in pairs:
        if not (0 <= i < 3 and 0 <= j < 3):
            raise ValueError(f"bad Hessian index {(i, j)}")
        out.append((min(i, j), max(i, j)))
    if len(set(out)) != len(out):
        raise ValueError("duplicate Hessian pair")
    return tuple(out)


class Jet2:
    __slots__ = ("comps", "pairs", "_I", "_J")

    def __init__(self, comps, pairs=FULL_PAIRS):
        self.pairs = _norm_pairs(pairs)
        self.comps = as_tensor(comps)
        if self.comps.shape[0] != 4 + len(self.pairs):
            raise ValueError(
                f"expected {4 + len(self.pairs)} components, got {self.comps.shape[0]}")
        self._I = np.array([p[0] for p in self.pairs], dtype=int)
        self._J = np.array([p[1] for p in self.pairs], dtype=int)

    # -- construction ------------------------------------------------------
    @classmethod
    def constant(cls, value, pairs=FULL_PAIRS) -> "Jet2":
        v = as_tensor(value)
        K = 4 + len(pairs)
        zeros = Tensor(np.zeros((K - 1,) + v.shape))
        return cls(ad.concat([ad.reshape(v, (1,) + v.shape), zeros], axis=0), pairs)

    # -- accessors -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.comps.shape[1:]

    @property
    def value(self) -> Tensor:
        return self.comps[0]

    @property
    def d1(self) -> Tensor:
        """First partials, shape ``[3, *S]`` in (t, z, x) order."""
        return self.comps[1:4]

    def d2(self, i: int, j: int) -> Tensor:
        key = (min(i, j), max(i, j))
        if key not in self.pairs:
            raise KeyError(f"second partial {key} is not tracked by this jet")
        return self.comps[4 + self.pairs.index(key)]

    def hessian(self) -> np.ndarray:
        """Dense symmetric ``[3, 3, *S]`` Hessian (untracked entries are NaN)."""
        H = np.full((3, 3) + self.shape, np.nan)
        for k, (i, j) in enumerate(self.pairs):
            H[i, j] = H[j, i] = self.comps.data[4 + k]
        return H

    def __repr__(self) -> str:
        return f"Jet2(shape={self.shape}, pairs={self.pairs})"

    # -- helpers -------------------------------------------------------------
    def _check(self, other: "Jet2") -> None:
        if other.pairs != self.pairs:
            raise ValueError("jets track different Hessian entries")

    def _lift(self, other) -> "Jet2 | None":
        return other if isinstance(other, Jet2) else None

    @staticmethod
    def _expand(x: Tensor) -> Tensor:
        return ad.reshape(x, (1,) + x.shape)

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other):
        o = self._lift(other)
        if o is not None:
            self._check(o)
            return Jet2(self.comps + o.comps, self.pairs)
        o = as_tensor(other)
        return Jet2(self.comps + _pad_value(o, self), self.pairs)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.comps, self.pairs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._lift(other)
        if o is None:
            o = as_tensor(other)
            return Jet2(self.comps * self._expand(o), self.pairs)
        self._check(o)
        a, b = self.comps, o.comps
        a0, b0 = a[0:1], b[0:1]
        a1, b1 = a[1:4], b[1:4]
        out0 = a0 * b0
        out1 = a0 * b1 + a1 * b0
        parts = [out0, out1]
        if self.pairs:
            I, J = self._I, self._J
            cross = a1[I] * b1[J] + a1[J] * b1[I]
            parts.append(a0 * b[4:] + a[4:] * b0 + cross)
        return Jet2(ad.concat(parts, axis=0), self.pairs)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet2):
            return self * other.reciprocal()
        return self * (1.0 / as_tensor(other).data)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, n: float):
        return self.apply(lambda u: u ** n,
                          lambda u: n * u ** (n - 1),
                          lambda u: n * (n - 1) * u ** (n - 2),
                          lambda u: n * (n - 1) * (n - 2) * u ** (n - 3))

    def sum(self, axis: int) -> "Jet2":
        ax = axis + 1 if axis >= 0 else axis
        return Jet2(ad.tsum(self.comps, axis=ax), self.pairs)

    def __getitem__(self, index) -> "Jet2":
        index = index if isinstance(index, tuple) else (index,)
        return Jet2(self.comps[(slice(None),) + index], self.pairs)

    # -- scalar chain rule -------------------------------------------------
    def apply(self, f, f1, f2, f3) -> "Jet2":
        """Compose a smooth scalar function (given its first three derivatives)."""
        c = self.comps
        cd = c.data
        v = cd[0]
        fv, f1v, f2v, f3v = f(v), f1(v), f2(v), f3(v)
        return self._fused_apply(c, cd, fv, f1v, f2v, f3v, "jet_fn")

    def apply_activation(self, kind: str) -> "Jet2":
        c = self.comps
        cd = c.data
        fv, f1v, f2v, f3v = activation_derivs(cd[0], kind, 3)
        return self._fused_apply(c, cd, fv, f1v, f2v, f3v, f"jet_{kind}")

    def exp(self) -> "Jet2":
        return self.apply(np.exp, np.exp, np.exp, np.exp)

    def reciprocal(self) -> "Jet2":
        return self.apply(lambda u: 1.0 / u, lambda u: -1.0 / u ** 2,
                          lambda u: 2.0 / u ** 3, lambda u: -6.0 / u ** 4)

    def sin(self) -> "Jet2":
        return self.apply(np.sin, np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u))

    def cos(self) -> "Jet2":
        return self.apply(np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u), np.sin)

    def _fused_apply(self, c, cd, fv, f1v, f2v, f3v, op) -> "Jet2":
        I, J = self._I, self._J
        D1 = cd[1:4]
        DP = cd[4:]
        prod = D1[I] * D1[J]
        out = np.empty_like(cd)
        out[0] = fv
        out[1:4] = f1v * D1
        if len(I):
            out[4:] = f1v * DP + f2v * prod

        def bw(g):
            g0, g1, gp = g[0], g[1:4], g[4:]
            gv = g0 * f1v + f2v * (g1 * D1).sum(axis=0)
            res = np.empty_like(cd)
            res[1:4] = g1 * f1v
            if len(I):
                gv = gv + (gp * (f2v * DP + f3v * prod)).sum(axis=0)
                t = gp * f2v
                for k in range(len(I)):
                    res[1 + I[k]] += t[k] * D1[J[k]]
                    res[1 + J[k]] += t[k] * D1[I[k]]
                res[4:] = gp * f1v
            res[0] = gv
            return (res,)

        return Jet2(_node(out, (c,), bw, op), self.pairs)

    def linear(self, W: Tensor, b: Tensor | None = None) -> "Jet2":
        """Apply ``x @ W.T + b`` along the trailing axis (bias enters the value only)."""
        c, W = self.comps, as_tensor(W)
        cd, Wd = c.data, W.data
        if cd.shape[-1] != Wd.shape[1]:
            raise ValueError("jet linear: width mismatch")
        out = cd @ Wd.T
        parents = [c, W]
        if b is not None:
            b = as_tensor(b)
            out[0] += b.data
            parents.append(b)

        def bw(g):
            gc = g @ Wd if c.requires_grad else None
            gW = (g.reshape(-1, g.shape[-1]).T @ cd.reshape(-1, cd.shape[-1])
                  if W.requires_grad else None)
            if b is None:
                return gc, gW
            gb = g[0].reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
            return gc, gW, gb

        return Jet2(_node(out, parents, bw, "jet_linear"), self.pairs)


def _pad_value(o: Tensor, jet: Jet2) -> Tensor:
    """Embed a plain tensor as the value component of a constant jet."""
    K = jet.comps.shape[0]
    shape = np.broadcast_shapes(o.shape, jet.shape)
    v = ad.broadcast_to(o, shape) if o.shape != shape else o
    zeros = Tensor(np.zeros((K - 1,) + shape, dtype=DTYPE))
    return ad.concat([ad.reshape(v, (1,) + shape), zeros], axis=0)


def jet_seed(t: float, z: float, x: float, pairs=FULL_PAIRS) -> tuple[Jet2, Jet2, Jet2]:
    """Coordinate jets with unit first partials and zero curvature."""
    pairs = _norm_pairs(pairs)
    K = 4 + len(pairs)
    jets = []
    for axis, val in enumerate((t, z, x)):
        comps = np.zeros(K)
        comps[0] = val
        comps[1 + axis] = 1.0
        jets.append(Jet2(Tensor(comps), pairs))
    return tuple(jets)
