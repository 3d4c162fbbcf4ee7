"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np

from flowsr.autodiff import Tensor

FD_STEP = 1e-5


def numeric_grad(f, arrays, index, h=FD_STEP):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=float) for a in arrays]
    target = base[index]
    g = np.zeros_like(target)
    for i in np.ndindex(target.shape):
        orig = target[i]
        target[i] = orig + h
        fp = f(*base)
        target[i] = orig - h
        fm = f(*base)
        target[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def taped_grads(build, arrays, weights=None):
    """Gradients of ``sum(weights * build(*tensors))`` through the tape."""
    ts = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    out = build(*ts)
    w = np.ones(out.shape) if weights is None else weights
    (out * Tensor(w)).sum().backward()
    return [t.grad for t in ts], out


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def grad_check(build, arrays, rng, h=FD_STEP, floor=1e-8):
    """Worst relative error between taped and finite-difference gradients.

    ``floor`` bounds the denominator for parameters whose exact gradient is zero.
    """
    probe = build(*[Tensor(np.array(a, dtype=float)) for a in arrays])
    w = rng.standard_normal(probe.shape)

    def scalar(*xs):
        return float((build(*[Tensor(x) for x in xs]).data * w).sum())

    grads, _ = taped_grads(build, arrays, w)
    return max(rel_err(g, numeric_grad(scalar, arrays, k, h), floor) for k, g in enumerate(grads))


def conv3d_loops(x, w, b=None):
    """Six-loop same-padded cross-correlation of [C,T,Z,X] with [O,C,kt,kz,kx]."""
    C, T, Z, X = x.shape
    O, _, kt, kz, kx = w.shape
    pt, pz, px = kt // 2, kz // 2, kx // 2
    out = np.zeros((O, T, Z, X))
    for o, t, z, xx in itertools.product(range(O), range(T), range(Z), range(X)):
        acc = 0.0 if b is None else b[o]
        for c, a, bz, cx in itertools.product(range(C), range(kt), range(kz), range(kx)):
            ti, zi, xi = t + a - pt, z + bz - pz, xx + cx - px
            if 0 <= ti < T and 0 <= zi < Z and 0 <= xi < X:
                acc += x[c, ti, zi, xi] * w[o, c, a, bz, cx]
        out[o, t, z, xx] = acc
    return out


def maxpool_loops(x):
    C, T, Z, X = x.shape
    out = np.zeros((C, T // 2, Z // 2, X // 2))
    for c, t, z, xx in itertools.product(range(C), range(T // 2), range(Z // 2), range(X // 2)):
        out[c, t, z, xx] = x[c, 2 * t:2 * t + 2, 2 * z:2 * z + 2, 2 * xx:2 * xx + 2].max()
    return out


def trilinear_by_hand(values, frac):
    """Interpolate a [2,2,2] corner cube at in-cell fraction ``frac``."""
    acc = 0.0
    for a, b, c in itertools.product((0, 1), repeat=3):
        w = ((frac[0] if a else 1 - frac[0]) * (frac[1] if b else 1 - frac[1])
             * (frac[2] if c else 1 - frac[2]))
        acc += w * values[a, b, c]
    return acc
