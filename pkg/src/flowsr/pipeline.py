"""End-to-end recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import replace

import numpy as np

from .baselines import DiscreteSRConfig, discrete_sr_baseline, train_discrete, trilinear_upsample
from .data import Dataset, add_gaussian_noise, denormalize, normalize
from .evaluation import MetricsReport, evaluate_all
from .fields import Field4, crop_window
from .physics import physics_params
from .training import Checkpoint, ContinuousSR, LossConfig, TrainConfig, data_parallel_train, train

log = logging.getLogger(__name__)


def covered_extents(ds: Dataset) -> tuple[int, int, int]:
    """HR node counts inside the bounding box of the LR nodes."""
    d = (ds.d_t, ds.d_s, ds.d_s)
    return tuple((ds.lr.extents[a] - 1) * d[a] + 1 for a in range(3))


def covered_truth(ds: Dataset) -> Field4:
    return crop_window(ds.hr, (0, 0, 0), covered_extents(ds))


def desk_train_config(ds: Dataset, **overrides) -> TrainConfig:
    """Budget that trains in minutes on one core: the whole LR field is one window."""
    base = dict(epochs=100, samples_per_epoch=16, points_per_window=512, batch_windows=1,
                lr_window=tuple(ds.lr.extents), upscale=(ds.d_t, ds.d_s, ds.d_s))
    base.update(overrides)
    return TrainConfig(**base)


DESK_DISCRETE = dict(epochs=20, samples_per_epoch=8, lr=3e-3)


def desk_discrete_configs(ds: Dataset, **overrides) -> tuple[TrainConfig, DiscreteSRConfig]:
    """Baseline budget: full-lattice output makes a step ~10x dearer than a continuous one."""
    cfg = desk_train_config(ds, **{**DESK_DISCRETE, **overrides})
    return cfg, DiscreteSRConfig(unet=copy.deepcopy(cfg.unet), stage_widths=(16, 8, 8), upscale=cfg.upscale)


def truth_for(ds: Dataset, pred: Field4) -> Field4:
    """HR sub-grid whose nodes coincide with ``pred``'s nodes."""
    hr = ds.hr
    if not np.allclose(pred.spacing, hr.spacing, rtol=1e-9):
        raise ValueError(f"prediction spacing {pred.spacing} differs from HR spacing {hr.spacing}")
    idx = [(pred.origin[a] - hr.origin[a]) / hr.spacing[a] for a in range(3)]
    o = [int(round(v)) for v in idx]
    if not np.allclose(idx, o, atol=1e-6):
        raise ValueError("prediction origin does not sit on an HR node")
    return crop_window(hr, o, pred.extents)


def evaluate_prediction(ds: Dataset, pred: Field4, meta=None, periodic_x: bool | None = None) -> MetricsReport:
    gt = truth_for(ds, pred)
    if periodic_x is None:
        periodic_x = gt.extents[2] == ds.hr.extents[2]
    return evaluate_all(pred, gt, physics_params(ds.Ra, ds.Pr), periodic_x, meta)


def evaluate_model(model: ContinuousSR, ds: Dataset, lr: Field4 | None = None, meta=None) -> MetricsReport:
    pred = model.superresolve(ds.lr if lr is None else lr, covered_extents(ds))
    return evaluate_prediction(ds, pred, meta)


def trilinear_report(ds: Dataset, lr: Field4 | None = None, meta=None) -> MetricsReport:
    pred = trilinear_upsample(ds.lr if lr is None else lr, covered_extents(ds))
    return evaluate_prediction(ds, pred, meta)


def discrete_report(ds: Dataset, cfg: TrainConfig, dcfg: DiscreteSRConfig | None = None,
                    meta=None) -> tuple[MetricsReport, Field4]:
    model, _ = train_discrete(cfg, ds, dcfg)
    full = discrete_sr_baseline(model, ds.lr, ds.norm_stats)
    pred = crop_window(full, (0, 0, 0), covered_extents(ds))
    return evaluate_prediction(ds, pred, meta), full


def noisy_lr(ds: Dataset, seed: int, scale: float = 1.0) -> Field4:
    """LR input with N(0, scale^2) noise added in HR-normalized space."""
    lr_n, _ = normalize(ds.lr, ds.norm_stats)
    return denormalize(add_gaussian_noise(lr_n, np.random.default_rng(seed), scale), ds.norm_stats)


def noise_eval(model: ContinuousSR, ds: Dataset, seed: int = 0) -> list[MetricsReport]:
    """Clean model, noisy-input model and noisy-input trilinear reports."""
    noisy = noisy_lr(ds, seed)
    return [
        evaluate_model(model, ds, meta={"case": "model_clean"}),
        evaluate_model(model, ds, noisy, meta={"case": "model_noisy"}),
        trilinear_report(ds, noisy, meta={"case": "trilinear_noisy"}),
    ]


def gamma_sweep(ds: Dataset, gammas, cfg: TrainConfig, loss_cfg: LossConfig | None = None
                ) -> tuple[list[MetricsReport], list[Checkpoint]]:
    reports, ckpts = [], []
    base = loss_cfg or LossConfig()
    for g in gammas:
        ck = train(copy.deepcopy(cfg), replace(base, gamma=float(g)), ds)
        reports.append(evaluate_model(ck.model, ds, meta={"gamma": float(g)}))
        ckpts.append(ck)
        log.info("gamma %g: avg R2 %s", g, reports[-1].avg_r2)
    return reports, ckpts


def scale_bench(ds: Dataset, cfg: TrainConfig, loss_cfg: LossConfig, max_workers: int,
                steps: int = 5) -> list[dict]:
    """Samples per second of synchronous data-parallel training for 1..max_workers."""
    rows = []
    for k in range(1, max_workers + 1):
        c = replace(cfg, n_workers=k, epochs=1, samples_per_epoch=cfg.batch_windows * k * steps)
        t0 = time.perf_counter()
        data_parallel_train(c, loss_cfg, ds, max_steps=steps)
        dt = time.perf_counter() - t0
        rows.append({"workers": k, "steps": steps, "seconds": dt,
                     "samples_per_s": k * cfg.batch_windows * steps / dt})
    base = rows[0]["samples_per_s"]
    for r in rows:
        r["speedup"] = r["samples_per_s"] / base
        r["efficiency"] = r["speedup"] / r["workers"]
    return rows


__all__ = [
    "covered_extents", "covered_truth", "desk_discrete_configs", "desk_train_config", "discrete_report", "evaluate_model",
    "evaluate_prediction", "gamma_sweep", "noise_eval", "noisy_lr", "scale_bench",
    "trilinear_report", "truth_for",
]
