"""Finite-difference solver for 2-D Rayleigh-Benard convection.

Nondimensional Boussinesq equations on a staggered (MAC) grid: periodic in x,
no-slip isothermal plates in z (T = 1 at the bottom, T = 0 at the top).
Convective and diffusive terms are second-order central differences in
conservative form; time integration is SSP-RK3 with an exact projection at
every stage (FFT in x, DCT-II in z), so each stage leaves a divergence-free
velocity to round-off.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft

from .fields import FLOW_CHANNELS, Field4
from .physics import physics_params

log = logging.getLogger(__name__)

DIVERGENCE_TOL = 1e-8


class CFLError(ValueError):
    """Time step violates the scheme's stability bound."""


@dataclass
class SimConfig:
    Ra: float = 1e5
    Pr: float = 1.0
    nx: int = 128
    nz: int = 32
    Lx: float = 4.0
    Lz: float = 1.0
    t_final: float = 50.0
    dt: float = 0.01
    snapshot_every: int = 50
    n_frames: int | None = 64  # keep only the last n_frames snapshots (None keeps all)
    seed: int = 0
    perturbation: float = 1e-3

    def validate(self) -> None:
        if self.nx < 8 or self.nz < 8:
            raise ValueError("nx and nz must be at least 8")
        if self.dt <= 0 or self.t_final <= 0 or self.snapshot_every < 1:
            raise ValueError("dt, t_final and snapshot_every must be positive")
        if self.n_frames is not None and self.n_frames * self.snapshot_every > self.n_steps:
            raise ValueError("n_frames * snapshot_every exceeds the number of steps")
        if self.Lx <= 0 or self.Lz <= 0:
            raise ValueError("domain lengths must be positive")
        dx, dz = self.Lx / self.nx, self.Lz / self.nz
        pp = physics_params(self.Ra, self.Pr)
        diff = max(pp.p_star, pp.r_star)
        # RK3 stability on the imaginary axis is sqrt(3); on the negative real axis ~2.5
        if self.dt * diff * (4.0 / dx ** 2 + 4.0 / dz ** 2) > 2.5:
            raise CFLError(f"diffusive stability bound violated for dt={self.dt}")
        # free-fall velocity scale is O(1) in these units
        if self.dt * (1.0 / dx + 1.0 / dz) > 1.0:
            raise CFLError(f"advective CFL bound violated for dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


class RBSolver:
    """Holds the staggered state; ``u`` on x-faces, ``w`` on z-faces, ``T`` at centers."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        self.nx, self.nz = cfg.nx, cfg.nz
        self.dx, self.dz = cfg.Lx / cfg.nx, cfg.Lz / cfg.nz
        pp = physics_params(cfg.Ra, cfg.Pr)
        self.nu, self.kappa = pp.r_star, pp.p_star
        self.zc = (np.arange(self.nz) + 0.5) * self.dz
        kx = np.arange(self.nx // 2 + 1)
        mz = np.arange(self.nz)
        lam_x = (2.0 - 2.0 * np.cos(2.0 * np.pi * kx / self.nx)) / self.dx ** 2
        lam_z = (2.0 - 2.0 * np.cos(np.pi * mz / self.nz)) / self.dz ** 2
        lam = -(lam_z[:, None] + lam_x[None, :])
        lam[0, 0] = 1.0
        self._inv_lam = 1.0 / lam
        self._inv_lam[0, 0] = 0.0
        self.u = np.zeros((self.nz, self.nx))
        self.w = np.zeros((self.nz + 1, self.nx))
        self.T = np.repeat((1.0 - self.zc)[:, None], self.nx, axis=1)
        if cfg.perturbation:
            rng = np.random.default_rng(cfg.seed)
            noise = rng.uniform(-1.0, 1.0, size=(self.nz, self.nx))
            self.T = self.T + cfg.perturbation * noise * np.sin(np.pi * self.zc)[:, None]
        self.time = 0.0

    # -- discrete operators ----------------------------------------------------
    def divergence(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return (np.roll(u, -1, axis=1) - u) / self.dx + (w[1:] - w[:-1]) / self.dz

    def _poisson(self, rhs: np.ndarray) -> np.ndarray:
        """Solve the Neumann/periodic discrete Poisson problem (zero-mean gauge)."""
        h = fft.rfft(rhs, axis=1)
        h = fft.dct(h.real, type=2, axis=0, norm="ortho") + 1j * fft.dct(h.imag, type=2, axis=0, norm="ortho")
        h *= self._inv_lam
        h = fft.idct(h.real, type=2, axis=0, norm="ortho") + 1j * fft.idct(h.imag, type=2, axis=0, norm="ortho")
        return fft.irfft(h, n=self.nx, axis=1)

    def _grad(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx = (p - np.roll(p, 1, axis=1)) / self.dx
        gz = np.zeros((self.nz + 1, self.nx))
        gz[1:-1] = (p[1:] - p[:-1]) / self.dz
        return gx, gz

    def project(self, u: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        phi = self._poisson(self.divergence(u, w))
        gx, gz = self._grad(phi)
        return u - gx, w - gz, phi

    def _rhs(self, u, w, T):
        dx, dz = self.dx, self.dz
        nu, kappa = self.nu, self.kappa
        # ghost rows: no-slip for u, fixed temperature for T
        ug = np.vstack([-u[:1], u, -u[-1:]])
        Tg = np.vstack([2.0 - T[:1], T, -T[-1:]])

        uc = 0.5 * (u + np.roll(u, -1, axis=1))            # u at cell centers
        fuu = uc * uc
        u_corner = 0.5 * (ug[1:] + ug[:-1])                 # (nz+1, nx) at (z-face, x-face)
        w_corner = 0.5 * (w + np.roll(w, 1, axis=1))
        fuw = u_corner * w_corner
        adv_u = (fuu - np.roll(fuu, 1, axis=1)) / dx + (fuw[1:] - fuw[:-1]) / dz

        wc = 0.5 * (w[1:] + w[:-1])
        fww = wc * wc
        adv_w = np.zeros_like(w)
        adv_w[1:-1] = ((np.roll(fuw[1:-1], -1, axis=1) - fuw[1:-1]) / dx
                       + (fww[1:] - fww[:-1]) / dz)

        lap_u = ((np.roll(u, -1, axis=1) - 2 * u + np.roll(u, 1, axis=1)) / dx ** 2
                 + (ug[2:] - 2 * u + ug[:-2]) / dz ** 2)
        lap_w = np.zeros_like(w)
        lap_w[1:-1] = ((np.roll(w[1:-1], -1, axis=1) - 2 * w[1:-1] + np.roll(w[1:-1], 1, axis=1)) / dx ** 2
                       + (w[2:] - 2 * w[1:-1] + w[:-2]) / dz ** 2)
        buoy = np.zeros_like(w)
        buoy[1:-1] = 0.5 * (T[1:] + T[:-1])

        fx = u * 0.5 * (T + np.roll(T, 1, axis=1))
        fz = np.zeros_like(w)
        fz[1:-1] = w[1:-1] * 0.5 * (T[1:] + T[:-1])
        adv_T = (np.roll(fx, -1, axis=1) - fx) / dx + (fz[1:] - fz[:-1]) / dz
        lap_T = ((np.roll(T, -1, axis=1) - 2 * T + np.roll(T, 1, axis=1)) / dx ** 2
                 + (Tg[2:] - 2 * T + Tg[:-2]) / dz ** 2)

        du = -adv_u + nu * lap_u
        dw = -adv_w + nu * lap_w + buoy
        dw[0] = dw[-1] = 0.0
        dT = -adv_T + kappa * lap_T
        return du, dw, dT

    def pressure(self) -> np.ndarray:
        """Instantaneous pressure: the potential that keeps du/dt divergence-free."""
        du, dw, _ = self._rhs(self.u, self.w, self.T)
        return self._poisson(self.divergence(du, dw))

    def step(self) -> float:
        """Advance one SSP-RK3 step; returns the max post-projection divergence."""
        dt = self.dt = self.cfg.dt
        u0, w0, T0 = self.u, self.w, self.T
        div_max = 0.0

        def stage(u, w, T, a, b):
            nonlocal div_max
            du, dw, dT = self._rhs(u, w, T)
            un = a * u0 + b * (u + dt * du)
            wn = a * w0 + b * (w + dt * dw)
            Tn = a * T0 + b * (T + dt * dT)
            un, wn, _ = self.project(un, wn)
            div_max = max(div_max, float(np.abs(self.divergence(un, wn)).max()))
            return un, wn, Tn

        u1, w1, T1 = stage(u0, w0, T0, 0.0, 1.0)
        u2, w2, T2 = stage(u1, w1, T1, 0.75, 0.25)
        self.u, self.w, self.T = stage(u2, w2, T2, 1.0 / 3.0, 2.0 / 3.0)
        self.time += dt
        if div_max > DIVERGENCE_TOL:
            raise FloatingPointError(f"projection left divergence {div_max:.3e}")
        return div_max

    def cfl(self) -> float:
        umax = float(np.abs(self.u).max())
        wmax = float(np.abs(self.w).max())
        return self.cfg.dt * (umax / self.dx + wmax / self.dz)

    def centered(self) -> np.ndarray:
        """Current state as ``[p, T, u, w]`` at cell centers, shape ``[4, nz, nx]``."""
        uc = 0.5 * (self.u + np.roll(self.u, -1, axis=1))
        wc = 0.5 * (self.w[1:] + self.w[:-1])
        return np.stack([self.pressure(), self.T, uc, wc])


def simulate_rb(cfg: SimConfig) -> Field4:
    """Run the solver and return stored frames as a Field4 with channels [p, T, u, w]."""
    solver = RBSolver(cfg)
    frames = []
    times = []
    n_snaps = cfg.n_steps // cfg.snapshot_every
    last_start = (n_snaps - cfg.n_frames) * cfg.snapshot_every if cfg.n_frames else 0
    for n in range(1, cfg.n_steps + 1):
        solver.step()
        if not np.isfinite(solver.T).all() or not np.isfinite(solver.u).all():
            raise FloatingPointError(f"non-finite field at step {n}")
        if solver.cfl() > 1.5:
            raise CFLError(f"CFL {solver.cfl():.2f} exceeded at t={solver.time:.3f}; reduce dt")
        if n % cfg.snapshot_every == 0 and (cfg.n_frames is None or n > last_start):
            frames.append(solver.centered())
            times.append(solver.time)
    if len(frames) == 0 or (cfg.n_frames is not None and len(frames) < cfg.n_frames):
        raise ValueError(
            f"only {len(frames)} frames stored; check t_final, dt, snapshot_every and n_frames")
    data = np.stack(frames, axis=1)  # [4, T, Z, X]
    dtf = cfg.dt * cfg.snapshot_every
    origin = (times[0], 0.5 * solver.dz, 0.5 * solver.dx)
    meta = {"sim": asdict(cfg)}
    log.info("simulated %d frames (Ra=%g, Pr=%g)", len(frames), cfg.Ra, cfg.Pr)
    return Field4(FLOW_CHANNELS, data, (dtf, solver.dz, solver.dx), origin, meta)
