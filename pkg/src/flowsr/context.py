"""3-D U-Net with residue blocks that turns a low-resolution window into a latent grid.

The contracting path applies a residue block per level followed by 2x2x2 max
pooling; the expanding path upsamples by nearest neighbour, concatenates the
skip features and applies another residue block.  A final 1x1x1 convolution
projects to ``n_c`` latent channels, so the output grid is vertex-aligned with
the input grid.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import Field4
from .layers import conv3d, kaiming_uniform, maxpool3d, norm_layer, relu, upsample_nearest3d

NORM_MODES = ("instance", "none")


@dataclass
class UNetConfig:
    in_channels: int = 4
    n_c: int = 32
    depth: int = 2
    base_width: int = 16
    norm_eps: float = 1e-5
    norm: str = "instance"  # "none" keeps every output strictly local (receptive-field tests)

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1 or self.n_c < 1 or self.in_channels < 1:
            raise ValueError("widths and channel counts must be positive")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}")

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** level for level in range(self.depth + 1)]

    def check_window(self, extents) -> None:
        m = 2 ** self.depth
        for n in extents:
            if n % m:
                raise ValueError(
                    f"window extents {tuple(extents)} must be divisible by 2^depth = {m}")

    def receptive_radius(self) -> tuple[int, int, int]:
        """Conservative per-axis reach (in input voxels) of one output voxel.

        Each residue block holds one 3x3x3 convolution (reach 1 at its level);
        a level-l voxel spans 2^l input voxels, and pool/upsample add up to
        2^l - 1 voxels of block misalignment.
        """
        r = 0
        for level in range(self.depth + 1):
            scale = 2 ** level
            blocks = 1 if level == self.depth else 2
            r += blocks * scale + (scale - 1) * (2 if level else 0)
        return (r, r, r)


@dataclass
class LatentContextGrid:
    """Latent vectors ``[n_c, T, Z, X]`` on the vertices of the low-resolution grid."""

    data: Tensor
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    @property
    def n_c(self) -> int:
        return self.data.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def upper(self) -> tuple[float, float, float]:
        return tuple(self.origin[a] + self.spacing[a] * (self.extents[a] - 1) for a in range(3))


def _block_shapes(prefix: str, c_in: int, c_out: int) -> list[tuple[str, tuple[int, ...], str]]:
    shapes = [
        (f"{prefix}.conv1.w", (c_out, c_in, 1, 1, 1), "w"), (f"{prefix}.conv1.b", (c_out,), "b"),
        (f"{prefix}.norm1.g", (c_out,), "g"), (f"{prefix}.norm1.b", (c_out,), "b"),
        (f"{prefix}.conv2.w", (c_out, c_out, 3, 3, 3), "w"), (f"{prefix}.conv2.b", (c_out,), "b"),
        (f"{prefix}.norm2.g", (c_out,), "g"), (f"{prefix}.norm2.b", (c_out,), "b"),
        (f"{prefix}.conv3.w", (c_out, c_out, 1, 1, 1), "w"), (f"{prefix}.conv3.b", (c_out,), "b"),
        (f"{prefix}.norm3.g", (c_out,), "g"), (f"{prefix}.norm3.b", (c_out,), "b"),
    ]
    if c_in != c_out:
        shapes.append((f"{prefix}.skip.w", (c_out, c_in, 1, 1, 1), "w"))
    return shapes


def unet_param_shapes(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, kind)`` for every parameter; kind is w, b or g."""
    cfg.validate()
    w = cfg.widths()
    shapes = _block_shapes("enc0", cfg.in_channels, w[0])
    for level in range(1, cfg.depth + 1):
        shapes += _block_shapes(f"enc{level}", w[level - 1], w[level])
    for level in range(cfg.depth - 1, -1, -1):
        shapes += _block_shapes(f"dec{level}", w[level + 1] + w[level], w[level])
    shapes += [("out.w", (cfg.n_c, w[0], 1, 1, 1), "w"), ("out.b", (cfg.n_c,), "b")]
    return shapes


def init_params(shapes, seed: int) -> "OrderedDict[str, Tensor]":
    """Kaiming-uniform weights (fan-in), zero biases and shifts, unit scales."""
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape, kind in shapes:
        if kind == "w":
            fan_in = int(np.prod(shape[1:]))
            data = kaiming_uniform(rng, shape, fan_in)
        elif kind == "g":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def residue_block(x: Tensor, params, prefix: str, norm: str = "instance", eps: float = 1e-5) -> Tensor:
    """Bottleneck residue block: 1x1x1, 3x3x3, 1x1x1 convolutions with a skip path."""
    p = params

    def nrm(h, k):
        if norm == "none":
            return h
        return norm_layer(h, p[f"{prefix}.norm{k}.g"], p[f"{prefix}.norm{k}.b"], eps)

    c_in = x.shape[-4]
    if p[f"{prefix}.conv1.w"].shape[1] != c_in:
        raise ValueError(f"{prefix}: input has {c_in} channels, block expects "
                         f"{p[f'{prefix}.conv1.w'].shape[1]}")
    h = relu(nrm(conv3d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]), 1))
    h = relu(nrm(conv3d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"]), 2))
    h = nrm(conv3d(h, p[f"{prefix}.conv3.w"], p[f"{prefix}.conv3.b"]), 3)
    skip_name = f"{prefix}.skip.w"
    skip = conv3d(x, p[skip_name]) if skip_name in p else x
    return relu(h + skip)


class ContextGenerator:
    """Parameter collection plus forward pass of the encoder."""

    def __init__(self, cfg: UNetConfig, params: "OrderedDict[str, Tensor]"):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "ContextGenerator":
        return ContextGenerator(copy.deepcopy(self.cfg), OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items()))

    def features(self, x: Tensor) -> list[Tensor]:
        """Contracting-path features, finest first (shared with the discrete baseline)."""
        cfg = self.cfg
        kw = {"norm": cfg.norm, "eps": cfg.norm_eps}
        feats = [residue_block(x, self.params, "enc0", **kw)]
        for level in range(1, cfg.depth + 1):
            feats.append(residue_block(maxpool3d(feats[-1]), self.params, f"enc{level}", **kw))
        return feats

    def forward(self, x) -> Tensor:
        """Map ``[C,T,Z,X]`` or ``[B,C,T,Z,X]`` input to ``n_c`` latent channels."""
        x = ad.as_tensor(x)
        cfg = self.cfg
        if x.shape[-4] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[-4]}")
        cfg.check_window(x.shape[-3:])
        kw = {"norm": cfg.norm, "eps": cfg.norm_eps}
        feats = self.features(x)
        h = feats[-1]
        axis = x.ndim - 4
        for level in range(cfg.depth - 1, -1, -1):
            h = ad.concat([upsample_nearest3d(h, 2), feats[level]], axis=axis)
            h = residue_block(h, self.params, f"dec{level}", **kw)
        return conv3d(h, self.params["out.w"], self.params["out.b"])


def build_unet(cfg: UNetConfig, rng_seed: int = 0) -> ContextGenerator:
    return ContextGenerator(cfg, init_params(unet_param_shapes(cfg), rng_seed))


def encode(gen: ContextGenerator, lr: Field4) -> LatentContextGrid:
    if len(lr.channels) != gen.cfg.in_channels:
        raise ValueError(f"field has {len(lr.channels)} channels, encoder expects {gen.cfg.in_channels}")
    return LatentContextGrid(gen.forward(Tensor(lr.data)), lr.spacing, lr.origin)


__all__ = [
    "ContextGenerator", "LatentContextGrid", "UNetConfig", "build_unet", "encode",
    "init_params", "residue_block", "unet_param_shapes",
]
