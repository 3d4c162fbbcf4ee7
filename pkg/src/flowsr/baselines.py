"""Reference reconstructors: plain trilinear interpolation and a discrete U-Net decoder."""

from __future__ import annotations

import copy
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .context import ContextGenerator, UNetConfig, build_unet, init_params
from .data import Dataset, denormalize, normalize
from .decoder import grid_field, target_grid
from .fields import Field4, sample_trilinear
from .layers import conv3d, norm_layer, relu, upsample_nearest3d
from .training import AdamState, History, TrainConfig, adam_step, prediction_loss, prepare

log = logging.getLogger(__name__)


def trilinear_upsample(lr: Field4, target_res) -> Field4:
    """Trilinear interpolation of ``lr`` on a regular grid spanning the same box."""
    coords = target_grid(lr, target_res)
    tt, zz, xx = np.meshgrid(*coords, indexing="ij")
    pts = np.stack([tt.ravel(), zz.ravel(), xx.ravel()], axis=1)
    data = sample_trilinear(lr, pts).T.reshape((lr.data.shape[0],) + tt.shape)
    return grid_field(coords, data, lr.channels, lr.spacing)


def upsample_stages(upscale) -> list[tuple[int, int, int]]:
    """Split per-axis power-of-two factors into a sequence of x2 / x1 stages."""
    counts = []
    for d in upscale:
        d = int(d)
        if d < 1 or d & (d - 1):
            raise ValueError(f"upscale factors must be powers of two, got {tuple(upscale)}")
        counts.append(d.bit_length() - 1)
    stages = []
    for s in range(max(counts)):
        stages.append(tuple(2 if c > s else 1 for c in counts))
    return stages


@dataclass
class DiscreteSRConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    stage_widths: tuple[int, ...] = (32, 16, 8)
    upscale: tuple[int, int, int] = (4, 8, 8)
    out_channels: int = 4

    def validate(self) -> None:
        self.unet.validate()
        n = len(upsample_stages(self.upscale))
        if len(self.stage_widths) != n:
            raise ValueError(f"need {n} stage widths for upscale {tuple(self.upscale)}")


class DiscreteSR:
    """Encoder followed by nearest-upsample, 3x3x3 convolution, norm, ReLU stages onto the HR lattice.

    Stages normalize like the encoder's blocks (``cfg.unet.norm``).
    """

    def __init__(self, cfg: DiscreteSRConfig, gen: ContextGenerator, params: "OrderedDict[str, Tensor]"):
        cfg.validate()
        self.cfg = cfg
        self.gen = gen
        self.params = params
        self.stages = upsample_stages(cfg.upscale)

    @classmethod
    def build(cls, cfg: DiscreteSRConfig, seed: int = 0) -> "DiscreteSR":
        cfg.validate()
        shapes, c_in = [], cfg.unet.n_c
        for i, w in enumerate(cfg.stage_widths):
            shapes += [(f"up{i}.w", (w, c_in, 3, 3, 3), "w"), (f"up{i}.b", (w,), "b")]
            if cfg.unet.norm != "none":
                shapes += [(f"up{i}.norm.g", (w,), "g"), (f"up{i}.norm.b", (w,), "b")]
            c_in = w
        shapes += [("head.w", (cfg.out_channels, c_in, 1, 1, 1), "w"), ("head.b", (cfg.out_channels,), "b")]
        return cls(cfg, build_unet(cfg.unet, seed), init_params(shapes, seed + 1))

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict((f"unet.{k}", v) for k, v in self.gen.params.items())
        out.update(self.params)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def clone(self) -> "DiscreteSR":
        return DiscreteSR(copy.deepcopy(self.cfg), self.gen.clone(), OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items()))

    def forward(self, x) -> Tensor:
        h = self.gen.forward(x)
        for i, f in enumerate(self.stages):
            h = conv3d(upsample_nearest3d(h, f), self.params[f"up{i}.w"], self.params[f"up{i}.b"])
            if f"up{i}.norm.g" in self.params:
                h = norm_layer(h, self.params[f"up{i}.norm.g"], self.params[f"up{i}.norm.b"], self.cfg.unet.norm_eps)
            h = relu(h)
        return conv3d(h, self.params["head.w"], self.params["head.b"])

    def predict(self, lr_n: Field4) -> Field4:
        """Normalized LR field to a normalized field on the full HR lattice."""
        with ad.no_grad():
            out = self.forward(Tensor(lr_n.data)).data
        d = self.cfg.upscale
        spacing = tuple(lr_n.spacing[a] / d[a] for a in range(3))
        return Field4(lr_n.channels, out, spacing, lr_n.origin)


def discrete_sr_baseline(model: DiscreteSR, lr: Field4, stats) -> Field4:
    """Physical-unit HR reconstruction from a physical-unit LR field."""
    lr_n, _ = normalize(lr, stats)
    return denormalize(model.predict(lr_n), stats)


def train_discrete(cfg: TrainConfig, dataset: Dataset, dcfg: DiscreteSRConfig | None = None,
                   pred_norm: str = "l1") -> tuple[DiscreteSR, History]:
    """Fit the discrete baseline with the prediction loss on HR lattice nodes only."""
    cfg.validate()
    dcfg = dcfg or DiscreteSRConfig(unet=copy.deepcopy(cfg.unet), upscale=cfg.upscale)
    if tuple(dcfg.upscale) != (dataset.d_t, dataset.d_s, dataset.d_s):
        raise ValueError("baseline upscale factors do not match the dataset")
    hr_n, lr_n, _ = prepare(dataset)
    model = DiscreteSR.build(dcfg, cfg.seed)
    params = model.parameters()
    state = AdamState.like(params)
    rng = np.random.default_rng(cfg.seed)
    w, d = cfg.lr_window, dcfg.upscale
    spans = [lr_n.extents[a] - w[a] + 1 for a in range(3)]
    if min(spans) < 1:
        raise ValueError("LR window larger than the LR field")
    hist = History()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            xs, ys = [], []
            for _ in range(cfg.batch_windows):
                o = [int(rng.integers(0, s)) for s in spans]
                xs.append(lr_n.data[:, o[0]:o[0] + w[0], o[1]:o[1] + w[1], o[2]:o[2] + w[2]])
                h = [o[a] * d[a] for a in range(3)]
                ys.append(hr_n.data[:, h[0]:h[0] + w[0] * d[0], h[1]:h[1] + w[1] * d[1],
                                    h[2]:h[2] + w[2] * d[2]])
            loss = prediction_loss(model.forward(Tensor(np.stack(xs))), np.stack(ys), pred_norm)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite baseline loss at epoch {epoch}")
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], state, cfg.lr)
            total += loss.item()
        hist.append(epoch, total / cfg.steps_per_epoch, total / cfg.steps_per_epoch, float("nan"))
        log.info("baseline epoch %d  loss %.5f  (%.1fs)", epoch, hist.loss_total[-1],
                 time.perf_counter() - t0)
    return model, hist


__all__ = [
    "DiscreteSR", "DiscreteSRConfig", "discrete_sr_baseline", "train_discrete",
    "trilinear_upsample", "upsample_stages",
]
