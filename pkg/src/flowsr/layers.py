"""Differentiable building blocks for the encoder and decoder networks.

Volumetric ops take ``[C, T, Z, X]`` or batched ``[B, C, T, Z, X]`` inputs.
Convolutions are stride 1 with same padding; every resolution change goes
through :func:`maxpool3d` or :func:`upsample_nearest3d`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import DTYPE, Tensor, _node, as_tensor

ACTIVATIONS = ("relu", "softplus", "swish")


def _as5d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 5:
        return x, False
    if x.ndim == 4:
        return _expand0(x), True
    raise ValueError(f"expected a [C,T,Z,X] or [B,C,T,Z,X] tensor, got shape {x.shape}")


def _expand0(x: Tensor) -> Tensor:
    return _node(x.data[None], (x,), lambda g: (g[0],), "expand")


def _squeeze0(x: Tensor) -> Tensor:
    return _node(x.data[0], (x,), lambda g: (g[None],), "squeeze")


def _correlate(xd: np.ndarray, wd: np.ndarray, pad: tuple[int, int, int]) -> np.ndarray:
    """Same-size cross-correlation of [B,C,T,Z,X] with [O,C,kt,kz,kx] -> [B,O,T,Z,X]."""
    kt, kz, kx = wd.shape[2:]
    if (kt, kz, kx) == (1, 1, 1):
        out = np.tensordot(wd[:, :, 0, 0, 0], xd, axes=([1], [1]))  # [O,B,T,Z,X]
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    pt, pz, px = pad
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (pz, pz), (px, px)))
    win = sliding_window_view(xp, (kt, kz, kx), axis=(2, 3, 4))  # [B,C,T,Z,X,kt,kz,kx]
    out = np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # [B,T,Z,X,O]
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=None) -> Tensor:
    """3-D cross-correlation, stride 1, zero same-padding.

    ``padding`` defaults to ``(k - 1) // 2`` per axis and must equal it when given.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    x5, squeezed = _as5d(x)
    wd = weight.data
    if wd.ndim != 5:
        raise ValueError("weight must be [C_out, C_in, kt, kz, kx]")
    if wd.shape[1] != x5.shape[1]:
        raise ValueError(f"channel mismatch: input has {x5.shape[1]}, weight expects {wd.shape[1]}")
    ks = wd.shape[2:]
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"kernel extents must be odd, got {ks}")
    pad = tuple((k - 1) // 2 for k in ks)
    if padding is not None:
        padding = (padding,) * 3 if np.isscalar(padding) else tuple(padding)
        if padding != pad:
            raise ValueError(f"padding must be (k-1)/2 per axis = {pad}")
    xd = x5.data
    out = _correlate(xd, wd, pad)
    parents = [x5, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ValueError("bias must be [C_out]")
        out = out + bias.data[None, :, None, None, None]
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if x5.requires_grad:
            wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _correlate(g, wflip, pad)
        if weight.requires_grad:
            if ks == (1, 1, 1):
                gw = np.tensordot(g, xd, axes=([0, 2, 3, 4], [0, 2, 3, 4]))[:, :, None, None, None]
            else:
                pt, pz, px = pad
                xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (pz, pz), (px, px)))
                win = sliding_window_view(xp, ks, axis=(2, 3, 4))
                gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    y = _node(out, parents, bw, "conv3d")
    return _squeeze0(y) if squeezed else y


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; ties route the gradient to the lowest index."""
    x = as_tensor(x)
    x5, squeezed = _as5d(x)
    B, C, T, Z, X = x5.shape
    if T % 2 or Z % 2 or X % 2:
        raise ValueError(f"pooled extents must be even, got {(T, Z, X)}")
    blocks = x5.data.reshape(B, C, T // 2, 2, Z // 2, 2, X // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, T // 2, Z // 2, X // 2, 8)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, T // 2, Z // 2, X // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(B, C, T, Z, X),)

    y = _node(out, (x5,), bw, "maxpool3d")
    return _squeeze0(y) if squeezed else y


def upsample_nearest3d(x: Tensor, factor) -> Tensor:
    """Replicate each cell ``factor`` times per axis (int or per-axis triple)."""
    x = as_tensor(x)
    f = (factor,) * 3 if np.isscalar(factor) else tuple(int(v) for v in factor)
    if len(f) != 3 or any(int(v) < 1 for v in f):
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    x5, squeezed = _as5d(x)
    B, C, T, Z, X = x5.shape
    ft, fz, fx = f
    out = np.broadcast_to(
        x5.data[:, :, :, None, :, None, :, None], (B, C, T, ft, Z, fz, X, fx)
    ).reshape(B, C, T * ft, Z * fz, X * fx)

    def bw(g):
        return (g.reshape(B, C, T, ft, Z, fz, X, fx).sum(axis=(3, 5, 7)),)

    y = _node(out, (x5,), bw, "upsample")
    return _squeeze0(y) if squeezed else y


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ W.T + b``."""
    x, W = as_tensor(x), as_tensor(W)
    xd, Wd = x.data, W.data
    if xd.shape[-1] != Wd.shape[1]:
        raise ValueError(f"linear: input width {xd.shape[-1]} != weight n_in {Wd.shape[1]}")
    out = xd @ Wd.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Wd.shape[0],):
            raise ValueError("linear: bias must be [n_out]")
        out = out + b.data
        parents.append(b)

    def bw(g):
        gx = g @ Wd if x.requires_grad else None
        gW = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if W.requires_grad else None
        if b is None:
            return gx, gW
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _node(out, parents, bw, "linear")


# -- activations -----------------------------------------------------------

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_np(x: np.ndarray) -> np.ndarray:
    # ln(1+e^x); for x > 30 the correction e^{-x} is below double precision
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def activation_derivs(x: np.ndarray, kind: str, order: int) -> list[np.ndarray]:
    """Return ``[f, f', ..., f^(order)]`` of a smooth activation evaluated at ``x``."""
    if kind == "swish":
        s = sigmoid_np(x)
        q = s * (1.0 - s)
        r = 1.0 - 2.0 * s
        out = [x * s, s + x * q]
        if order >= 2:
            out.append(q * (2.0 + x * r))
        if order >= 3:
            out.append(q * r * (2.0 + x * r) + q * r - 2.0 * x * q * q)
    elif kind == "softplus":
        s = sigmoid_np(x)
        q = s * (1.0 - s)
        out = [softplus_np(x), s]
        if order >= 2:
            out.append(q)
        if order >= 3:
            out.append(q * (1.0 - 2.0 * s))
    else:
        raise ValueError(f"no smooth derivatives for activation {kind!r}")
    return out[: order + 1]


def activation(x, kind: str = "swish"):
    """Elementwise activation on a Tensor or a :class:`~flowsr.jets.Jet2`."""
    from .jets import Jet2

    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    if isinstance(x, Jet2):
        if kind == "relu":
            raise ValueError("relu is not twice differentiable and cannot act on a Jet2")
        return x.apply_activation(kind)
    x = as_tensor(x)
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return _node(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,), "relu")
    f, f1 = activation_derivs(xd, kind, 1)
    return _node(f, (x,), lambda g: (g * f1,), kind)


def relu(x):
    return activation(x, "relu")


# -- normalization ---------------------------------------------------------

def norm_layer(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-instance, per-channel standardization followed by scale and shift.

    Statistics are taken over every non-channel axis of each instance and are
    recomputed on every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    x5, squeezed = _as5d(x)
    C = x5.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"norm_layer: expected [{C}] scale/shift, got {gamma.shape}, {beta.shape}")
    xd = x5.data
    axes = (2, 3, 4)
    n = xd.shape[2] * xd.shape[3] * xd.shape[4]
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None, None]
    out = gd * xhat + beta.data[None, :, None, None, None]

    def bw(g):
        gx = None
        if x5.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=axes, keepdims=True) / n)
        ggamma = (g * xhat).sum(axis=(0, 2, 3, 4)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3, 4)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    y = _node(out, (x5, gamma, beta), bw, "norm")
    return _squeeze0(y) if squeezed else y


# -- initialization --------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
