"""Rayleigh-Benard governing-equation residuals and parameter bookkeeping.

Channel order everywhere is ``[p, T, u, w]``.  First derivatives are ordered
``(d/dt, d/dz, d/dx)`` and second derivatives ``(d2/dz2, d2/dx2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

P, TEMP, U, W = 0, 1, 2, 3
DT, DZ, DX = 0, 1, 2
DZZ, DXX = 0, 1


@dataclass(frozen=True)
class PhysicsParams:
    Ra: float
    Pr: float

    def __post_init__(self):
        if not (self.Ra > 0 and self.Pr > 0):
            raise ValueError(f"Ra and Pr must be positive, got Ra={self.Ra}, Pr={self.Pr}")

    @property
    def p_star(self) -> float:
        """Thermal diffusion coefficient (Ra*Pr)^-1/2."""
        return (self.Ra * self.Pr) ** -0.5

    @property
    def r_star(self) -> float:
        """Momentum diffusion coefficient (Ra/Pr)^-1/2."""
        return (self.Ra / self.Pr) ** -0.5

    @property
    def nu_eff(self) -> float:
        return self.r_star


def physics_params(Ra: float, Pr: float) -> PhysicsParams:
    return PhysicsParams(float(Ra), float(Pr))


@dataclass
class ResidualVector:
    r_cont: Tensor
    r_mom_x: Tensor
    r_mom_z: Tensor
    r_temp: Tensor

    def components(self) -> list[Tensor]:
        return [self.r_cont, self.r_mom_x, self.r_mom_z, self.r_temp]

    def numpy(self) -> np.ndarray:
        """``[4, N]`` array of residual values."""
        return np.stack([c.data for c in self.components()])


def rb_residuals(y, d1, d2, params: PhysicsParams, source=None) -> ResidualVector:
    """Pointwise residuals of the 2-D Boussinesq system.

    ``y`` is ``[N, 4]``, ``d1`` is ``[N, 4, 3]`` and ``d2`` is ``[N, 4, 2]``;
    numpy arrays or taped tensors are accepted.  ``source`` optionally supplies
    a right-hand side (four arrays of length N) that is subtracted.
    """
    if d1 is None or d2 is None:
        raise ValueError("rb_residuals needs first and second derivative blocks")
    y, d1, d2 = as_tensor(y), as_tensor(d1), as_tensor(d2)
    if y.ndim != 2 or y.shape[1] != 4:
        raise ValueError(f"y must be [N, 4], got {y.shape}")
    n = y.shape[0]
    if d1.shape != (n, 4, 3) or d2.shape != (n, 4, 2):
        raise ValueError(f"derivative blocks must be [N,4,3] and [N,4,2], got {d1.shape}, {d2.shape}")

    u, w, T = y[:, U], y[:, W], y[:, TEMP]

    def d(ch, ax):
        return d1[:, ch, ax]

    def lap(ch):
        return d2[:, ch, DZZ] + d2[:, ch, DXX]

    rs, pr = params.r_star, params.p_star
    r_cont = d(U, DX) + d(W, DZ)
    r_mx = d(U, DT) + u * d(U, DX) + w * d(U, DZ) + d(P, DX) - rs * lap(U)
    r_mz = d(W, DT) + u * d(W, DX) + w * d(W, DZ) + d(P, DZ) - T - rs * lap(W)
    r_t = d(TEMP, DT) + u * d(TEMP, DX) + w * d(TEMP, DZ) - pr * lap(TEMP)
    res = [r_cont, r_mx, r_mz, r_t]
    if source is not None:
        src = source.components() if isinstance(source, ResidualVector) else list(source)
        if len(src) != 4:
            raise ValueError("source must have four components")
        res = [r - as_tensor(s) for r, s in zip(res, src)]
    return ResidualVector(*res)


ResidualFn = Callable[..., "ResidualVector | list[Tensor]"]

_REGISTRY: dict[str, ResidualFn] = {"rayleigh_benard_2d": rb_residuals}


def register_residual(pde_id: str, fn: ResidualFn) -> None:
    """Make ``fn`` (same signature as :func:`rb_residuals`) available by name."""
    _REGISTRY[pde_id] = fn


def residual_operator(pde_id: str) -> ResidualFn:
    try:
        return _REGISTRY[pde_id]
    except KeyError:
        raise KeyError(f"unknown PDE id {pde_id!r}; registered: {sorted(_REGISTRY)}") from None


def residual_components(res) -> list[Tensor]:
    if isinstance(res, ResidualVector):
        return res.components()
    return [as_tensor(r) for r in res]


def stack_residuals(res) -> Tensor:
    """``[N, k]`` tensor of the k residual components."""
    return ad.stack(residual_components(res), axis=1)


def check_training_envelope(params: PhysicsParams) -> bool:
    """True when Ra in [1e4, 1e8] and Pr in [0.1, 10]."""
    return 1e4 <= params.Ra <= 1e8 and 0.1 <= params.Pr <= 10.0 and math.isfinite(params.Ra)
