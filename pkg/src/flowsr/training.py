"""Losses, point sampling, Adam, checkpoints and (data-parallel) training loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .context import ContextGenerator, UNetConfig, build_unet
from .data import Dataset, denormalize, normalize
from .decoder import MLP, DecodedSample, MLPConfig, QueryBatch, _latent_rows, decode_points, superresolve
from .fields import Field4, locate, sample_trilinear
from .jets import SPATIAL_DIAG
from .physics import PhysicsParams, physics_params, residual_components, residual_operator

log = logging.getLogger(__name__)

PRED_NORMS = ("l1", "l2", "huber")


@dataclass
class LossConfig:
    gamma: float = 0.05
    pred_norm: str = "l1"
    huber_delta: float = 1.0
    weight_decay: float = 0.0
    pde_id: str = "rayleigh_benard_2d"

    def validate(self) -> None:
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.pred_norm not in PRED_NORMS:
            raise ValueError(f"pred_norm must be one of {PRED_NORMS}")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 100
    samples_per_epoch: int = 3000
    points_per_window: int = 512
    batch_windows: int = 4
    seed: int = 0
    n_workers: int = 1
    lr_window: tuple[int, int, int] = (4, 4, 8)
    upscale: tuple[int, int, int] = (4, 8, 8)
    unet: UNetConfig = field(default_factory=UNetConfig)
    mlp: MLPConfig = field(default_factory=MLPConfig)

    def __post_init__(self):
        self.lr_window = tuple(int(v) for v in self.lr_window)
        self.upscale = tuple(int(v) for v in self.upscale)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if isinstance(self.mlp, dict):
            self.mlp = MLPConfig(**self.mlp)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("samples_per_epoch", "points_per_window", "batch_windows", "n_workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.mlp.n_c != self.unet.n_c:
            raise ValueError("MLP latent width must equal the encoder's n_c")
        self.unet.validate()
        self.mlp.validate()
        self.unet.check_window(self.lr_window)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.samples_per_epoch // (self.batch_windows * self.n_workers))


# -- model ---------------------------------------------------------------------

class ContinuousSR:
    """Encoder, decoder MLP and the normalization statistics they were trained with."""

    def __init__(self, gen: ContextGenerator, mlp: MLP, stats: dict[str, tuple[float, float]],
                 channels=("p", "T", "u", "w")):
        self.gen = gen
        self.mlp = mlp
        self.stats = dict(stats)
        self.channels = tuple(channels)

    @classmethod
    def build(cls, cfg: TrainConfig, stats, channels=("p", "T", "u", "w")) -> "ContinuousSR":
        gen = build_unet(cfg.unet, cfg.seed)
        mlp = MLP.build(cfg.mlp, cfg.seed + 1)
        return cls(gen, mlp, stats, channels)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict((f"unet.{k}", v) for k, v in self.gen.params.items())
        out.update(self.mlp.params)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def clone(self) -> "ContinuousSR":
        return ContinuousSR(self.gen.clone(), self.mlp.clone(), self.stats, self.channels)

    def stats_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        mean = np.array([self.stats[c][0] for c in self.channels])
        std = np.array([self.stats[c][1] for c in self.channels])
        return mean, std

    def superresolve(self, lr: Field4, target_res) -> Field4:
        """Physical-unit LR field in, physical-unit field on a ``target_res`` grid out."""
        lr_n, _ = normalize(lr, self.stats)
        out = superresolve(self.gen, self.mlp, lr_n, target_res)
        return denormalize(out, self.stats)


# -- losses ----------------------------------------------------------------------

def _elementwise_norm(r: Tensor, norm: str, delta: float) -> Tensor:
    if norm == "l1":
        return ad.tabs(r)
    if norm == "l2":
        return r * r
    if norm == "huber":
        a = np.abs(r.data)
        small = a <= delta
        return ad.where(small, 0.5 * (r * r), delta * (ad.tabs(r) - 0.5 * delta))
    raise ValueError(f"unknown norm {norm!r}")


def prediction_loss(pred, gt, norm: str = "l1", delta: float = 1.0) -> Tensor:
    """Mean over points and channels of the per-element norm of ``pred - gt``."""
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    return ad.mean(_elementwise_norm(pred - gt, norm, delta))


def equation_loss(residuals, norm: str = "l1", delta: float = 1.0) -> Tensor:
    """Mean over points and residual components of the per-element norm."""
    comps = residual_components(residuals)
    if not comps or comps[0].size == 0:
        raise ValueError("empty batch")
    r = ad.stack(comps, axis=1)
    if not np.isfinite(r.data).all():
        raise NonFiniteError("non-finite PDE residual")
    return ad.mean(_elementwise_norm(r, norm, delta))


def total_loss(lp, le, cfg: LossConfig, params=()) -> Tensor:
    out = ad.as_tensor(lp)
    if cfg.gamma and le is not None:
        out = out + cfg.gamma * ad.as_tensor(le)
    if cfg.weight_decay:
        out = out + cfg.weight_decay * sum((ad.tsum(ad.tabs(p)) for p in params), Tensor(0.0))
    return out


# -- sampling --------------------------------------------------------------------

@dataclass
class WindowSpec:
    """Physical box ``[lo, hi]`` of an LR crop plus its LR node origin."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    lr_origin: tuple[int, int, int] = (0, 0, 0)


def window_spec(lr: Field4, origin_idx, extents) -> WindowSpec:
    lo = tuple(lr.origin[a] + origin_idx[a] * lr.spacing[a] for a in range(3))
    hi = tuple(lo[a] + (extents[a] - 1) * lr.spacing[a] for a in range(3))
    return WindowSpec(lo, hi, tuple(int(v) for v in origin_idx))


def sample_query_points(hr: Field4, window: WindowSpec, n_points: int,
                        rng: np.random.Generator) -> QueryBatch:
    """Uniform points in the window box with trilinearly interpolated HR targets."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    lo, hi = np.asarray(window.lo), np.asarray(window.hi)
    hr_lo, hr_hi = np.asarray(hr.origin), np.asarray(hr.upper())
    tol = 1e-9 * np.asarray(hr.spacing)
    if np.any(lo < hr_lo - tol) or np.any(hi > hr_hi + tol) or np.any(hi < lo):
        raise ValueError(f"window {window.lo}..{window.hi} outside the HR domain")
    pts = lo + rng.uniform(size=(n_points, 3)) * (hi - lo)
    return QueryBatch(pts, sample_trilinear(hr, pts), window.lr_origin)


def _valid_origins(lr_extents, window) -> list[int]:
    for a in range(3):
        if window[a] > lr_extents[a]:
            raise ValueError(f"LR window {tuple(window)} larger than LR extents {tuple(lr_extents)}")
    return [lr_extents[a] - window[a] + 1 for a in range(3)]


def draw_samples(hr_n: Field4, lr_n: Field4, cfg: TrainConfig, rng: np.random.Generator, count: int):
    """``count`` random (LR window origin, QueryBatch) pairs."""
    spans = _valid_origins(lr_n.extents, cfg.lr_window)
    out = []
    for _ in range(count):
        o = tuple(int(rng.integers(0, s)) for s in spans)
        win = window_spec(lr_n, o, cfg.lr_window)
        out.append((o, sample_query_points(hr_n, win, cfg.points_per_window, rng)))
    return out


# -- forward / backward for one batch ----------------------------------------

@dataclass
class StepResult:
    loss: float
    loss_pred: float
    loss_eq: float
    grads: list[np.ndarray]


def batch_losses(model: ContinuousSR, lr_n: Field4, samples, cfg: TrainConfig, loss_cfg: LossConfig,
                 params: PhysicsParams):
    """Total, prediction and equation losses of one batch of windows (taped)."""
    ext = cfg.lr_window
    windows = np.stack([lr_n.data[:, o[0]:o[0] + ext[0], o[1]:o[1] + ext[1], o[2]:o[2] + ext[2]]
                        for o, _ in samples])
    latents = model.gen.forward(Tensor(windows))
    rows = _latent_rows(latents)
    cells, fracs, widx, targets = [], [], [], []
    for b, (o, q) in enumerate(samples):
        origin = tuple(lr_n.origin[a] + o[a] * lr_n.spacing[a] for a in range(3))
        c, f = locate(q.points, origin, lr_n.spacing, ext)
        cells.append(c)
        fracs.append(f)
        widx.append(np.full(len(c), b))
        targets.append(q.targets)
    want = loss_cfg.gamma > 0
    dec = decode_points(rows, ext, lr_n.spacing, np.concatenate(cells), np.concatenate(fracs),
                        model.mlp, want, SPATIAL_DIAG, np.concatenate(widx))
    lp = prediction_loss(dec.y, np.concatenate(targets), loss_cfg.pred_norm, loss_cfg.huber_delta)
    le = None
    if want:
        le = equation_loss(physical_residuals(model, dec, params, loss_cfg.pde_id),
                           loss_cfg.pred_norm, loss_cfg.huber_delta)
    total = total_loss(lp, le, loss_cfg, model.parameters())
    return total, lp, le


def physical_residuals(model: ContinuousSR, dec: DecodedSample, params: PhysicsParams,
                       pde_id: str = "rayleigh_benard_2d"):
    """Residuals of the governing equations in physical units of the decoded sample."""
    mean, std = model.stats_arrays()
    y = dec.y * Tensor(std) + Tensor(mean)
    d1 = dec.d1 * Tensor(std[None, :, None])
    d2 = dec.d2_diag * Tensor(std[None, :, None])
    return residual_operator(pde_id)(y, d1, d2, params)


def compute_step(model: ContinuousSR, lr_n: Field4, samples, cfg: TrainConfig,
                 loss_cfg: LossConfig, params: PhysicsParams) -> StepResult:
    total, lp, le = batch_losses(model, lr_n, samples, cfg, loss_cfg, params)
    ps = model.parameters()
    for p in ps:
        p.zero_grad()
    total.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in ps]
    return StepResult(total.item(), lp.item(), le.item() if le is not None else float("nan"), grads)


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"MFSRCKP1"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    loss_pred: list[float] = field(default_factory=list)
    loss_eq: list[float] = field(default_factory=list)

    def append(self, epoch, total, pred, eq) -> None:
        self.epoch.append(int(epoch))
        self.loss_total.append(float(total))
        self.loss_pred.append(float(pred))
        self.loss_eq.append(float(eq))

    def rows(self):
        return list(zip(self.epoch, self.loss_total, self.loss_pred, self.loss_eq))


@dataclass
class Checkpoint:
    model: ContinuousSR
    train_cfg: TrainConfig
    loss_cfg: LossConfig
    epoch: int
    history: History
    rng_state: list = field(default_factory=list)
    physics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    named = ckpt.model.named_parameters()
    directory, blobs, offset = [], [], 0
    for name, p in named.items():
        b = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(b)
        offset += len(b)
    payload = b"".join(blobs)
    h = ckpt.history
    manifest = {
        "version": CKPT_VERSION,
        "config": {"train": asdict(ckpt.train_cfg), "loss": asdict(ckpt.loss_cfg)},
        "epoch": ckpt.epoch,
        "channels": list(ckpt.model.channels),
        "norm_stats": {k: list(v) for k, v in ckpt.model.stats.items()},
        "physics": ckpt.physics,
        "params": directory,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "rng_state": ckpt.rng_state,
        "history": {"epoch": h.epoch, "loss_total": h.loss_total,
                    "loss_pred": h.loss_pred, "loss_eq": h.loss_eq},
        "extra": ckpt.extra,
    }
    mbytes = json.dumps(_json_safe(manifest), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise CheckpointFormatError("truncated", "file shorter than the fixed preamble")
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointFormatError("magic", f"bad magic {buf[:8]!r}")
    (mlen,) = struct.unpack_from("<I", buf, 8)
    if 12 + mlen > len(buf):
        raise CheckpointFormatError("truncated", "manifest extends past end of file")
    try:
        man = json.loads(buf[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("manifest", f"unreadable manifest ({exc})") from None
    if man.get("version") != CKPT_VERSION:
        raise CheckpointFormatError("version", f"unsupported version {man.get('version')}")
    payload = buf[12 + mlen:]
    if len(payload) != man["payload_bytes"]:
        raise CheckpointFormatError("truncated", "parameter payload has the wrong length")
    if zlib.crc32(payload) != man["payload_crc32"]:
        raise CheckpointFormatError("checksum", "parameter payload CRC32 mismatch")
    tcfg = TrainConfig(**man["config"]["train"])
    lcfg = LossConfig(**man["config"]["loss"])
    stats = {k: (float(v[0]), float(v[1])) for k, v in man["norm_stats"].items()}
    model = ContinuousSR.build(tcfg, stats, man["channels"])
    named = model.named_parameters()
    if [e["name"] for e in man["params"]] != list(named):
        raise CheckpointFormatError("params", "parameter directory does not match the configured model")
    for e in man["params"]:
        p = named[e["name"]]
        n = int(np.prod(e["shape"])) * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=e["offset"])
        p.data = arr.reshape(e["shape"]).astype(np.float64)
    h = man["history"]
    nan = float("nan")
    hist = History(list(h["epoch"]), [nan if v is None else v for v in h["loss_total"]],
                   [nan if v is None else v for v in h["loss_pred"]],
                   [nan if v is None else v for v in h["loss_eq"]])
    return Checkpoint(model, tcfg, lcfg, int(man["epoch"]), hist, man.get("rng_state", []),
                      man.get("physics", {}), man.get("extra", {}))


def write_loss_csv(history: History, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_total", "loss_pred", "loss_eq"])
        for row in history.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# -- training loops ----------------------------------------------------------------

class WorkerError(RuntimeError):
    def __init__(self, worker: int, exc: BaseException):
        super().__init__(f"worker {worker} failed: {exc!r}")
        self.worker = worker
        self.cause = exc


def prepare(dataset: Dataset) -> tuple[Field4, Field4, PhysicsParams]:
    """Normalize HR and LR with the HR statistics."""
    hr_n, _ = normalize(dataset.hr, dataset.norm_stats)
    lr_n, _ = normalize(dataset.lr, dataset.norm_stats)
    return hr_n, lr_n, physics_params(dataset.Ra, dataset.Pr)


def average_grads(per_worker: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Average gradients summing in ascending worker order."""
    k = len(per_worker)
    out = [g.copy() for g in per_worker[0]]
    for w in range(1, k):
        for acc, g in zip(out, per_worker[w]):
            acc += g
    return [g / k for g in out]


def data_parallel_train(cfg: TrainConfig, loss_cfg: LossConfig, dataset: Dataset,
                        model: ContinuousSR | None = None, on_step=None, max_steps: int | None = None,
                        ) -> Checkpoint:
    """Synchronous data-parallel training on ``cfg.n_workers`` thread replicas.

    Each worker draws its own batch from a private rng (seed + worker index);
    gradients are averaged in ascending worker order and the identical Adam
    update is applied to every replica.  ``on_step(step, replicas)`` is called
    after every update; ``max_steps`` stops early (for tests and benchmarks).
    """
    cfg.validate()
    loss_cfg.validate()
    if tuple(cfg.upscale) != (dataset.d_t, dataset.d_s, dataset.d_s):
        raise ValueError(f"upscale {cfg.upscale} does not match the dataset factors "
                         f"({dataset.d_t}, {dataset.d_s}, {dataset.d_s})")
    hr_n, lr_n, params = prepare(dataset)
    k = cfg.n_workers
    if model is None:
        model = ContinuousSR.build(cfg, dataset.norm_stats, dataset.channels)
    replicas = [model] + [model.clone() for _ in range(k - 1)]
    states = [AdamState.like(r.parameters()) for r in replicas]
    rngs = [np.random.default_rng(cfg.seed + w) for w in range(k)]
    history = History()
    step = 0

    def work(w: int):
        try:
            samples = draw_samples(hr_n, lr_n, cfg, rngs[w], cfg.batch_windows)
            return compute_step(replicas[w], lr_n, samples, cfg, loss_cfg, params)
        except Exception as exc:  # re-raised on the coordinating thread with the worker id
            raise WorkerError(w, exc) from exc

    pool = ThreadPoolExecutor(max_workers=k) if k > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums = np.zeros(3)
            n = 0
            for _ in range(cfg.steps_per_epoch):
                if pool is None:
                    results = [work(0)]
                else:
                    results = [f.result() for f in [pool.submit(work, w) for w in range(k)]]
                losses = np.array([[r.loss, r.loss_pred, r.loss_eq] for r in results]).mean(axis=0)
                if not np.isfinite(losses[:2]).all():
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
                grads = average_grads([r.grads for r in results])
                for rep, st in zip(replicas, states):
                    adam_step(rep.parameters(), grads, st, cfg.lr)
                sums += losses
                n += 1
                step += 1
                if on_step is not None:
                    on_step(step, replicas)
                if max_steps is not None and step >= max_steps:
                    break
            mean = sums / n
            history.append(epoch, *mean)
            log.info("epoch %d  loss %.5f  pred %.5f  eq %.5f  (%.1fs)",
                     epoch, mean[0], mean[1], mean[2], time.perf_counter() - t0)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return Checkpoint(model, cfg, loss_cfg, len(history.epoch), history,
                      [r.bit_generator.state for r in rngs],
                      {"Ra": dataset.Ra, "Pr": dataset.Pr})


def train(cfg: TrainConfig, loss_cfg: LossConfig, dataset: Dataset, **kw) -> Checkpoint:
    """Single-replica training (``cfg.n_workers`` is honoured if larger than one)."""
    return data_parallel_train(cfg, loss_cfg, dataset, **kw)


__all__ = [
    "AdamState", "Checkpoint", "CheckpointFormatError", "ContinuousSR", "History", "LossConfig",
    "TrainConfig", "WindowSpec", "WorkerError", "adam_step", "average_grads", "batch_losses",
    "compute_step", "data_parallel_train", "draw_samples", "equation_loss", "load_checkpoint",
    "physical_residuals", "prediction_loss", "prepare", "sample_query_points", "save_checkpoint",
    "total_loss", "train", "window_spec", "write_loss_csv",
]
