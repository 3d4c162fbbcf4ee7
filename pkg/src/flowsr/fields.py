"""Gridded space-time containers shared by the data, model and metric code."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

FLOW_CHANNELS = ("p", "T", "u", "w")


@dataclass
class Field4:
    """Channels on a regular ``[C, T, Z, X]`` grid with physical spacing and origin."""

    channels: tuple[str, ...]
    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.data.ndim != 4:
            raise ValueError(f"Field4 data must be [C,T,Z,X], got shape {self.data.shape}")
        if len(self.channels) != self.data.shape[0]:
            raise ValueError("channel names do not match the channel extent")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def coords(self, axis: int) -> np.ndarray:
        """Node coordinates along axis 0 (t), 1 (z) or 2 (x)."""
        n = self.data.shape[1 + axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n)

    def upper(self) -> tuple[float, float, float]:
        """Coordinates of the last node along each axis."""
        return tuple(self.origin[a] + self.spacing[a] * (self.data.shape[1 + a] - 1) for a in range(3))

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channels.index(name)]

    def with_data(self, data: np.ndarray) -> "Field4":
        return replace(self, data=data, meta=dict(self.meta))

    def copy(self) -> "Field4":
        return replace(self, data=self.data.copy(), meta=dict(self.meta))


def crop_window(f: Field4, origin_idx, extents) -> Field4:
    """Sub-block starting at node ``origin_idx`` with ``extents`` nodes per axis."""
    o = tuple(int(v) for v in origin_idx)
    e = tuple(int(v) for v in extents)
    if len(o) != 3 or len(e) != 3:
        raise ValueError("crop needs three origin indices and three extents")
    for a in range(3):
        if o[a] < 0 or e[a] < 1 or o[a] + e[a] > f.extents[a]:
            raise IndexError(
                f"window {o}+{e} outside field extents {f.extents}")
    data = f.data[:, o[0]:o[0] + e[0], o[1]:o[1] + e[1], o[2]:o[2] + e[2]].copy()
    origin = tuple(f.origin[a] + o[a] * f.spacing[a] for a in range(3))
    return Field4(f.channels, data, f.spacing, origin, dict(f.meta))


BOUND_TOL = 1e-9


def locate(points, origin, spacing, extents) -> tuple[np.ndarray, np.ndarray]:
    """Cell index ``[N, 3]`` and in-cell fraction ``[N, 3]`` of points on a regular grid.

    Points on the upper boundary belong to the last cell; anything further
    out than a small tolerance is rejected.
    """
    origin, spacing = np.asarray(origin, float), np.asarray(spacing, float)
    ext = np.asarray(extents, int)
    pts = np.atleast_2d(np.asarray(points, float))
    s = (pts - origin) / spacing
    outside = np.any((s < -BOUND_TOL) | (s > (ext - 1) + BOUND_TOL), axis=1)
    if outside.any():
        bad = int(np.argmax(outside))
        raise ValueError(f"point {tuple(pts[bad])} lies outside the grid box")
    s = np.clip(s, 0.0, ext - 1)
    cell = np.minimum(np.floor(s).astype(int), np.maximum(ext - 2, 0))
    return cell, s - cell


def sample_trilinear(f: Field4, points) -> np.ndarray:
    """Trilinear interpolation of every channel at physical points, ``[N, C]``."""
    cell, frac = locate(points, f.origin, f.spacing, f.extents)
    T, Z, X = f.extents
    out = np.zeros((cell.shape[0], f.data.shape[0]))
    for ot in (0, 1):
        wt = frac[:, 0] if ot else 1.0 - frac[:, 0]
        it = np.minimum(cell[:, 0] + ot, T - 1)
        for oz in (0, 1):
            wz = frac[:, 1] if oz else 1.0 - frac[:, 1]
            iz = np.minimum(cell[:, 1] + oz, Z - 1)
            for ox in (0, 1):
                wx = frac[:, 2] if ox else 1.0 - frac[:, 2]
                ix = np.minimum(cell[:, 2] + ox, X - 1)
                out += (wt * wz * wx)[:, None] * f.data[:, it, iz, ix].T
    return out
