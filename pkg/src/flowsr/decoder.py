"""Continuous decoding of a latent context grid at arbitrary (t, z, x) points.

Each query point sits in one cell of the latent grid.  An MLP is evaluated at
the cell's 8 vertices on the vertex latent vector concatenated with the point's
position relative to that vertex (in units of the grid spacing), and the 8
outputs are blended with trilinear weights.  Coordinate derivatives come from
pushing second-order jets through both the relative coordinates and the
weights; they are converted to physical units at the end.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .context import ContextGenerator, LatentContextGrid, encode, init_params
from .fields import BOUND_TOL, Field4, locate
from .jets import SPATIAL_DIAG, Jet2, _norm_pairs
from .layers import activation, linear

# vertex offsets in (t, z, x), ordered with x fastest
VERTEX_OFFSETS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=int)


@dataclass
class MLPConfig:
    n_c: int = 32
    hidden: list[int] = field(default_factory=lambda: [64, 64, 64, 64])
    out_dim: int = 4
    act: str = "swish"

    @property
    def in_dim(self) -> int:
        return 3 + self.n_c

    def validate(self) -> None:
        if self.act not in ("swish", "softplus"):
            raise ValueError(f"decoder activation must be twice differentiable, got {self.act!r}")
        if self.out_dim < 1 or self.n_c < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("MLP widths must be positive")


class MLP:
    """Fully connected network ``[rel_t, rel_z, rel_x, latent...] -> out_dim``."""

    def __init__(self, cfg: MLPConfig, params: "OrderedDict[str, Tensor]"):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.n_layers = len(cfg.hidden) + 1

    @classmethod
    def build(cls, cfg: MLPConfig, seed: int = 0) -> "MLP":
        return cls(cfg, init_params(mlp_param_shapes(cfg), seed))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def clone(self) -> "MLP":
        return MLP(copy.deepcopy(self.cfg), OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items()))

    def _wb(self, i: int) -> tuple[Tensor, Tensor]:
        return self.params[f"mlp.l{i}.w"], self.params[f"mlp.l{i}.b"]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for i in range(self.n_layers):
            h = linear(h, *self._wb(i))
            if i < self.n_layers - 1:
                h = activation(h, self.cfg.act)
        return h

    def forward_jet(self, x, pairs) -> Jet2:
        """Jet of the output with respect to the first three input columns.

        Those columns are taken to move with unit speed along t, z and x, so
        the first layer's jet is exact without materializing an input jet.
        """
        x = ad.as_tensor(x)
        W, b = self._wb(0)
        v = linear(x, W, b)
        cols = ad.transpose(W[:, 0:3], (1, 0))                       # [3, H]
        d1 = ad.broadcast_to(ad.reshape(cols, (3, 1, cols.shape[1])), (3,) + v.shape)
        zeros = Tensor(np.zeros((len(pairs),) + v.shape))
        h = Jet2(ad.concat([ad.reshape(v, (1,) + v.shape), d1, zeros], axis=0), pairs)
        for i in range(1, self.n_layers):
            h = h.apply_activation(self.cfg.act).linear(*self._wb(i))
        return h


def mlp_param_shapes(cfg: MLPConfig) -> list[tuple[str, tuple[int, ...], str]]:
    dims = [cfg.in_dim] + list(cfg.hidden) + [cfg.out_dim]
    shapes = []
    for i in range(len(dims) - 1):
        shapes.append((f"mlp.l{i}.w", (dims[i + 1], dims[i]), "w"))
        shapes.append((f"mlp.l{i}.b", (dims[i + 1],), "b"))
    return shapes


@dataclass
class QueryBatch:
    points: np.ndarray                      # [N, 3] physical (t, z, x)
    targets: np.ndarray | None = None       # [N, m]
    window_ref: int | str | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[1] != 3:
            raise ValueError(f"points must be [N, 3], got {self.points.shape}")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape[0] != self.points.shape[0]:
                raise ValueError("targets and points disagree in length")


@dataclass
class DecodedSample:
    y: Tensor                               # [N, m]
    d1: Tensor | None = None                # [N, m, 3] in (t, z, x)
    d2: Tensor | None = None                # [N, m, P] for the tracked pairs
    pairs: tuple[tuple[int, int], ...] = ()

    def second(self, i: int, j: int) -> Tensor:
        key = (min(i, j), max(i, j))
        if self.d2 is None or key not in self.pairs:
            raise KeyError(f"second partial {key} was not computed")
        return self.d2[:, :, self.pairs.index(key)]

    @property
    def d2_diag(self) -> Tensor | None:
        """``[N, m, 2]`` block of d2/dz2 and d2/dx2."""
        if self.d2 is None:
            return None
        return ad.stack([self.second(1, 1), self.second(2, 2)], axis=2)


# -- trilinear geometry ------------------------------------------------------

def vertex_weights(frac: np.ndarray) -> np.ndarray:
    """Trilinear weights ``[8, N]`` of in-cell fractions ``[N, 3]``, vertices as VERTEX_OFFSETS."""
    frac = np.atleast_2d(np.asarray(frac, float))
    return np.where(VERTEX_OFFSETS[:, None, :] == 1, frac[None], 1.0 - frac[None]).prod(axis=2)


def trilinear_weights(point, cell_origin, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Weights and relative coordinates of one point w.r.t. its cell's 8 vertices.

    ``cell_origin`` is the lowest vertex of the cell.  Returns ``weights[8]``
    and ``rel[8, 3]`` with ``rel[j] = (point - vertex_j) / spacing``; vertices
    are ordered as :data:`VERTEX_OFFSETS`.
    """
    s = (np.asarray(point, float) - np.asarray(cell_origin, float)) / np.asarray(spacing, float)
    if np.any(s < -BOUND_TOL) or np.any(s > 1 + BOUND_TOL):
        raise ValueError(f"point {tuple(point)} lies outside the cell at {tuple(cell_origin)}")
    s = np.clip(s, 0.0, 1.0)
    return vertex_weights(s)[:, 0], s[None, :] - VERTEX_OFFSETS


def _weight_jet(frac: np.ndarray, pairs) -> Jet2:
    """Constant (parameter-free) jet of the 8 trilinear weights, shape ``[8, N, 1]``.

    Derivatives are with respect to the normalized coordinates.
    """
    n = frac.shape[0]
    sign = np.where(VERTEX_OFFSETS == 1, 1.0, -1.0)                     # [8, 3]
    f = np.where(VERTEX_OFFSETS[:, None, :] == 1, frac[None], 1.0 - frac[None])  # [8, N, 3]
    comps = np.zeros((4 + len(pairs), 8, n, 1))
    comps[0, :, :, 0] = vertex_weights(frac)
    for a in range(3):
        others = [b for b in range(3) if b != a]
        comps[1 + a, :, :, 0] = sign[:, None, a] * f[:, :, others].prod(axis=2)
    for k, (a, b) in enumerate(pairs):
        if a != b:
            c = 3 - a - b
            comps[4 + k, :, :, 0] = sign[:, None, a] * sign[:, None, b] * f[:, :, c]
    return Jet2(Tensor(comps), pairs)


# -- decoding ------------------------------------------------------------------

def _latent_rows(latents: Tensor) -> Tensor:
    """``[B, n_c, T, Z, X]`` (or unbatched) latents as ``[B*T*Z*X, n_c]`` rows."""
    if latents.ndim == 4:
        latents = ad.reshape(latents, (1,) + latents.shape)
    B, C, T, Z, X = latents.shape
    return ad.reshape(ad.transpose(latents, (0, 2, 3, 4, 1)), (B * T * Z * X, C))


def decode_points(rows: Tensor, extents, spacing, cell: np.ndarray, frac: np.ndarray,
                  mlp: MLP, want_derivs: bool, pairs=SPATIAL_DIAG,
                  window: np.ndarray | None = None) -> DecodedSample:
    """Core decoder over pre-located points.

    ``rows`` holds latent vectors of one or several windows flattened as in
    :func:`_latent_rows`; ``window`` gives each point's window index.
    """
    T, Z, X = (int(e) for e in extents)
    n = cell.shape[0]
    vidx = cell[None, :, :] + VERTEX_OFFSETS[:, None, :]                # [8, N, 3]
    flat = (vidx[..., 0] * Z + vidx[..., 1]) * X + vidx[..., 2]
    if window is not None:
        flat = flat + np.asarray(window, int)[None, :] * (T * Z * X)
    rel = frac[None, :, :] - VERTEX_OFFSETS[:, None, :]                 # [8, N, 3]
    lat = ad.take_rows(rows, flat.reshape(-1))                          # [8N, n_c]
    inp = ad.concat([Tensor(rel.reshape(-1, 3)), lat], axis=1)
    m = mlp.cfg.out_dim
    if not want_derivs:
        w = vertex_weights(frac)
        out = ad.reshape(mlp(inp), (8, n, m))
        y = ad.tsum(out * Tensor(w[:, :, None]), axis=0)
        return DecodedSample(y)

    if mlp.cfg.act == "relu":
        raise ValueError("derivatives require a twice-differentiable activation")
    pairs = _norm_pairs(pairs)
    phi = mlp.forward_jet(inp, pairs)
    phi = Jet2(ad.reshape(phi.comps, (phi.comps.shape[0], 8, n, m)), pairs)
    blended = (phi * _weight_jet(frac, pairs)).sum(axis=0)              # comps [K, N, m]
    inv = 1.0 / np.asarray(spacing, float)
    scale = np.concatenate([[1.0], inv, [inv[a] * inv[b] for a, b in pairs]])
    comps = blended.comps * Tensor(scale[:, None, None])
    y = comps[0]
    d1 = ad.transpose(comps[1:4], (1, 2, 0))
    d2 = ad.transpose(comps[4:], (1, 2, 0)) if pairs else None
    return DecodedSample(y, d1, d2, pairs)


def query(grid: LatentContextGrid, mlp: MLP, batch, want_derivs: bool = False,
          pairs=SPATIAL_DIAG) -> DecodedSample:
    """Decode ``batch`` (a QueryBatch or ``[N, 3]`` array of physical points)."""
    points = batch.points if isinstance(batch, QueryBatch) else QueryBatch(batch).points
    if grid.n_c != mlp.cfg.n_c:
        raise ValueError(f"latent grid has {grid.n_c} channels, MLP expects {mlp.cfg.n_c}")
    cell, frac = locate(points, grid.origin, grid.spacing, grid.extents)
    return decode_points(_latent_rows(grid.data), grid.extents, grid.spacing, cell, frac,
                         mlp, want_derivs, pairs)


def target_grid(lr: Field4, target_res) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis coordinates of a regular grid spanning the same box as ``lr``."""
    res = tuple(int(r) for r in target_res)
    if len(res) != 3 or any(r < 1 for r in res):
        raise ValueError(f"target resolution must be three positive ints, got {target_res}")
    lo, hi = lr.origin, lr.upper()
    return tuple(np.linspace(lo[a], hi[a], res[a]) for a in range(3))


def grid_field(coords, data: np.ndarray, channels, fallback_spacing) -> Field4:
    spacing = tuple(float(c[1] - c[0]) if len(c) > 1 else float(fallback_spacing[a])
                    for a, c in enumerate(coords))
    origin = tuple(float(c[0]) for c in coords)
    return Field4(channels, data, spacing, origin)


def superresolve(gen: ContextGenerator, mlp: MLP, lr: Field4, target_res,
                 chunk: int = 8192) -> Field4:
    """Encode ``lr`` once and decode a regular grid of ``target_res`` nodes."""
    coords = target_grid(lr, target_res)
    with ad.no_grad():
        grid = encode(gen, lr)
        rows = _latent_rows(grid.data)
        tt, zz, xx = np.meshgrid(*coords, indexing="ij")
        pts = np.stack([tt.ravel(), zz.ravel(), xx.ravel()], axis=1)
        out = np.empty((pts.shape[0], mlp.cfg.out_dim))
        for s in range(0, pts.shape[0], chunk):
            cell, frac = locate(pts[s:s + chunk], grid.origin, grid.spacing, grid.extents)
            out[s:s + chunk] = decode_points(rows, grid.extents, grid.spacing, cell, frac,
                                             mlp, False).y.data
    data = out.T.reshape((mlp.cfg.out_dim,) + tt.shape)
    return grid_field(coords, data, lr.channels, lr.spacing)


__all__ = [
    "DecodedSample", "MLP", "MLPConfig", "QueryBatch", "VERTEX_OFFSETS", "decode_points",
    "locate", "mlp_param_shapes", "query", "superresolve", "target_grid", "trilinear_weights",
    "vertex_weights",
]
