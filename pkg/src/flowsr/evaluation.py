"""Per-frame turbulence statistics and NMAE / R2 scoring of reconstructed fields.

Every metric is one scalar per time frame, computed from the velocity
channels ``u`` and ``w`` on a ``[Z, X]`` slice.  Two fields are compared by
scoring the per-frame series of each metric.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import Field4
from .physics import PhysicsParams

METRICS = ("e_tot", "u_rms", "dissipation", "taylor_lambda", "re_lambda",
           "tau_eta", "eta", "integral_scale", "eddy_turnover")


class UndefinedScaleError(ValueError):
    """A derived scale needs a strictly positive dissipation or velocity."""


@dataclass
class FrameMetrics:
    e_tot: float
    u_rms: float
    dissipation: float
    taylor_lambda: float | None
    re_lambda: float | None
    tau_eta: float | None
    eta: float | None
    integral_scale: float | None
    eddy_turnover: float | None


# -- single-frame quantities -------------------------------------------------

def total_kinetic_energy(u: np.ndarray, w: np.ndarray) -> float:
    u, w = np.asarray(u, float), np.asarray(w, float)
    if u.size == 0:
        raise ValueError("empty frame")
    return float(0.5 * np.mean(u * u + w * w))


def rms_velocity(e_tot: float) -> float:
    if e_tot < 0:
        raise ValueError("kinetic energy must be non-negative")
    return math.sqrt(2.0 / 3.0 * e_tot)


def _ddx(f: np.ndarray, dx: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / (2.0 * dx)
    return np.gradient(f, dx, axis=1, edge_order=2)


def velocity_gradients(u, w, dz: float, dx: float, periodic_x: bool = True):
    """``(du/dx, du/dz, dw/dx, dw/dz)`` by second-order differences on ``[Z, X]``."""
    u, w = np.asarray(u, float), np.asarray(w, float)
    if min(u.shape) < 3:
        raise ValueError(f"need at least 3 nodes per axis, got {u.shape}")
    return (_ddx(u, dx, periodic_x), np.gradient(u, dz, axis=0, edge_order=2),
            _ddx(w, dx, periodic_x), np.gradient(w, dz, axis=0, edge_order=2))


def dissipation(u, w, nu: float, dz: float, dx: float, periodic_x: bool = True) -> float:
    """``2 nu <S_ij S_ij>`` over the (x, z) strain-rate tensor."""
    ux, uz, wx, wz = velocity_gradients(u, w, dz, dx, periodic_x)
    sxz = 0.5 * (uz + wx)
    return float(2.0 * nu * np.mean(ux * ux + wz * wz + 2.0 * sxz * sxz))


def derived_scales(u_rms: float, eps: float, nu: float) -> tuple[float, float, float, float]:
    """Taylor microscale, its Reynolds number, Kolmogorov time and length scales."""
    if not eps > 0:
        raise UndefinedScaleError(f"dissipation must be positive, got {eps}")
    if not nu > 0:
        raise ValueError("viscosity must be positive")
    lam = math.sqrt(15.0 * nu * u_rms ** 2 / eps)
    return lam, u_rms * lam / nu, math.sqrt(nu / eps), nu ** 0.75 * eps ** -0.25


def energy_spectrum(u, w) -> np.ndarray:
    """One-sided spectrum ``E(k)`` for integer k = 1..nx/2 along x, averaged over z.

    Normalized so that ``sum(E) + mean_flow_energy(u, w) == E_tot``.
    """
    u, w = np.asarray(u, float), np.asarray(w, float)
    nx = u.shape[-1]
    if nx < 4:
        raise ValueError("x extent must be at least 4")
    uh = np.fft.rfft(u, axis=-1) / nx
    wh = np.fft.rfft(w, axis=-1) / nx
    power = (np.abs(uh) ** 2 + np.abs(wh) ** 2).mean(axis=0)
    mult = np.full(power.shape, 2.0)
    if nx % 2 == 0:
        mult[-1] = 1.0
    return 0.5 * (mult * power)[1:]


def mean_flow_energy(u, w) -> float:
    """Energy of the x-averaged flow (the k = 0 term left out of the spectrum)."""
    um = np.asarray(u, float).mean(axis=-1)
    wm = np.asarray(w, float).mean(axis=-1)
    return float(0.5 * np.mean(um * um + wm * wm))


def integral_scale(spectrum: np.ndarray, u_rms: float) -> float:
    if not u_rms > 0:
        raise UndefinedScaleError("u_rms must be positive")
    k = np.arange(1, len(spectrum) + 1)
    return float(math.pi / (2.0 * u_rms ** 2) * np.sum(spectrum / k))


def eddy_turnover(L: float, u_rms: float) -> float:
    if not u_rms > 0:
        raise UndefinedScaleError("u_rms must be positive")
    return L / u_rms


def frame_metrics(u, w, nu: float, dz: float, dx: float, periodic_x: bool = True) -> FrameMetrics:
    e = total_kinetic_energy(u, w)
    ur = rms_velocity(e)
    eps = dissipation(u, w, nu, dz, dx, periodic_x)
    try:
        lam, re_l, tau, eta = derived_scales(ur, eps, nu)
    except UndefinedScaleError:
        lam = re_l = tau = eta = None
    try:
        L = integral_scale(energy_spectrum(u, w), ur)
        tl = eddy_turnover(L, ur)
    except UndefinedScaleError:
        L = tl = None
    return FrameMetrics(e, ur, eps, lam, re_l, tau, eta, L, tl)


def metric_series(f: Field4, nu: float, periodic_x: bool = True) -> dict[str, np.ndarray]:
    """Per-frame values of every metric; undefined entries are NaN."""
    u, w = f.channel("u"), f.channel("w")
    dz, dx = f.spacing[1], f.spacing[2]
    rows = [frame_metrics(u[i], w[i], nu, dz, dx, periodic_x) for i in range(u.shape[0])]
    return {m: np.array([np.nan if getattr(r, m) is None else getattr(r, m) for r in rows])
            for m in METRICS}


# -- scores ----------------------------------------------------------------------

def _check_series(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape or pred.ndim != 1 or len(gt) < 2:
        raise ValueError("series must be 1-D, equal length and at least 2 long")
    if np.ptp(gt) == 0:
        raise ValueError("ground-truth series is constant")
    return pred, gt


def nmae(pred, gt) -> float:
    pred, gt = _check_series(pred, gt)
    return float(np.mean(np.abs(pred - gt)) / np.ptp(gt))


def r2(pred, gt) -> float:
    pred, gt = _check_series(pred, gt)
    return float(1.0 - np.sum((pred - gt) ** 2) / np.sum((gt - gt.mean()) ** 2))


@dataclass
class MetricScore:
    nmae_x100: float | None
    r2: float | None


@dataclass
class MetricsReport:
    scores: dict[str, MetricScore]
    avg_r2: float | None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores: dict[str, MetricScore], meta: dict | None = None) -> "MetricsReport":
        vals = [scores[m].r2 for m in METRICS]
        avg = None if any(v is None for v in vals) else float(np.mean(vals))
        return cls(scores, avg, dict(meta or {}))

    def to_dict(self) -> dict:
        return {"metrics": {m: asdict(self.scores[m]) for m in METRICS},
                "avg_r2": self.avg_r2, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        scores = {m: MetricScore(**d["metrics"][m]) for m in METRICS}
        return cls(scores, d["avg_r2"], d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.meta.items()):
            buf.write(f"# {k}={json.dumps(v)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "nmae_x100", "r2"])
        for m in METRICS:
            s = self.scores[m]
            w.writerow([m, _fmt(s.nmae_x100), _fmt(s.r2)])
        w.writerow(["avg_r2", "", _fmt(self.avg_r2)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        meta, lines = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                k, v = line[2:].split("=", 1)
                meta[k] = json.loads(v)
            elif line.strip():
                lines.append(line)
        rows = list(csv.reader(lines))
        if rows[0] != ["metric", "nmae_x100", "r2"]:
            raise ValueError("not a metrics report CSV")
        scores, avg = {}, None
        for name, a, b in rows[1:]:
            if name == "avg_r2":
                avg = _parse(b)
            else:
                scores[name] = MetricScore(_parse(a), _parse(b))
        missing = set(METRICS) - set(scores)
        if missing:
            raise ValueError(f"report CSV lacks metrics {sorted(missing)}")
        return cls(scores, avg, meta)

    def save(self, path) -> None:
        path = Path(path)
        text = self.to_json() if path.suffix == ".json" else self.to_csv()
        path.write_text(text)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        path = Path(path)
        text = path.read_text()
        return cls.from_json(text) if path.suffix == ".json" else cls.from_csv(text)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(s: str):
    return None if s == "" else float(s)


def score_series(pred: dict[str, np.ndarray], gt: dict[str, np.ndarray]) -> dict[str, MetricScore]:
    out = {}
    for m in METRICS:
        p, g = pred[m], gt[m]
        ok = np.isfinite(p) & np.isfinite(g)
        if ok.sum() < 2 or np.ptp(g[ok]) == 0:
            out[m] = MetricScore(None, None)
        else:
            out[m] = MetricScore(100.0 * nmae(p[ok], g[ok]), r2(p[ok], g[ok]))
    return out


def evaluate_all(pred: Field4, gt: Field4, params: PhysicsParams, periodic_x: bool = True,
                 meta: dict | None = None) -> MetricsReport:
    """Score every metric of ``pred`` against ``gt`` frame by frame (viscosity = r_star)."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {gt.data.shape}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=1e-9) or not np.allclose(
            pred.origin, gt.origin, rtol=1e-9, atol=1e-12):
        raise ValueError("pred and gt grids have different coordinates")
    nu = params.nu_eff
    return MetricsReport.from_scores(
        score_series(metric_series(pred, nu, periodic_x), metric_series(gt, nu, periodic_x)), meta)


def table_csv(reports: list[MetricsReport], label: str) -> str:
    """One row per report, ``100xNMAE (R2)`` cells per metric, then avg R2."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label] + [f"{m}_nmae_x100" for m in METRICS] + [f"{m}_r2" for m in METRICS] + ["avg_r2"])
    for r in reports:
        w.writerow([r.meta.get(label, "")] + [_fmt(r.scores[m].nmae_x100) for m in METRICS]
                   + [_fmt(r.scores[m].r2) for m in METRICS] + [_fmt(r.avg_r2)])
    return buf.getvalue()


__all__ = [
    "FrameMetrics", "METRICS", "MetricScore", "MetricsReport", "UndefinedScaleError",
    "derived_scales", "dissipation", "eddy_turnover", "energy_spectrum", "evaluate_all",
    "frame_metrics", "integral_scale", "mean_flow_energy", "metric_series", "nmae", "r2",
    "rms_velocity", "table_csv", "total_kinetic_energy",
]
