import numpy as np
import pytest
import sympy as sp

from flowsr.autodiff import Tensor
from flowsr.jets import FULL_PAIRS, SPATIAL_DIAG, Jet2, jet_seed

from oracles import numeric_grad

TS, ZS, XS = sp.symbols("t z x")


def _compose(t, z, x, sin, exp):
    a = sin(t * z) + x * x * z
    b = exp(0.3 * x - 0.2 * t) / (1.5 + z * z)
    return (a * b) ** 2.0 - 0.5 * a


def _sym_reference(point):
    expr = _compose(TS, ZS, XS, sp.sin, sp.exp)
    sub = dict(zip((TS, ZS, XS), point))
    syms = (TS, ZS, XS)
    grad = [float(sp.diff(expr, s).subs(sub)) for s in syms]
    hess = {(i, j): float(sp.diff(expr, syms[i], syms[j]).subs(sub)) for i, j in FULL_PAIRS}
    return float(expr.subs(sub)), grad, hess


@pytest.mark.parametrize("point", [(0.3, 0.7, -0.4), (1.2, -0.5, 0.9), (-0.8, 0.1, 0.25)])
def test_jet_matches_symbolic_derivatives(point):
    t, z, x = jet_seed(*point)
    f = _compose(t, z, x, lambda j: j.sin(), lambda j: j.exp())
    val, grad, hess = _sym_reference(point)
    assert f.value.item() == pytest.approx(val, rel=1e-12)
    np.testing.assert_allclose(f.d1.data, grad, rtol=1e-11, atol=1e-12)
    for (i, j), ref in hess.items():
        assert f.d2(i, j).item() == pytest.approx(ref, rel=1e-10, abs=1e-12)
        assert f.d2(j, i).item() == f.d2(i, j).item()


def test_subset_pairs_agree_with_full():
    p = (0.4, -0.2, 0.6)
    full = _compose(*jet_seed(*p), lambda j: j.sin(), lambda j: j.exp())
    diag = _compose(*jet_seed(*p, pairs=SPATIAL_DIAG), lambda j: j.sin(), lambda j: j.exp())
    np.testing.assert_allclose(diag.d1.data, full.d1.data, rtol=1e-14)
    for i, j in SPATIAL_DIAG:
        assert diag.d2(i, j).item() == pytest.approx(full.d2(i, j).item(), rel=1e-14)
    with pytest.raises(KeyError):
        diag.d2(0, 1)


@pytest.mark.parametrize("kind", ["swish", "softplus"])
def test_activation_jet_matches_finite_differences(kind, rng):
    W = rng.standard_normal((5, 3))
    b = rng.standard_normal(5)
    p0 = rng.uniform(-1, 1, 3)

    def plain(p):
        h = W @ p + b
        if kind == "swish":
            return float(np.sum(h / (1 + np.exp(-h))))
        return float(np.sum(np.log1p(np.exp(h))))

    jets = jet_seed(*p0)
    comps = np.stack([j.comps.data for j in jets], axis=-1)  # [K, 3]
    out = Jet2(Tensor(comps)).linear(Tensor(W), Tensor(b)).apply_activation(kind).sum(axis=0)
    h = 1e-4
    eye = np.eye(3)
    fd1 = [(plain(p0 + h * e) - plain(p0 - h * e)) / (2 * h) for e in eye]
    np.testing.assert_allclose(out.d1.data, fd1, rtol=1e-7)
    for i, j in FULL_PAIRS:
        ei, ej = eye[i] * h, eye[j] * h
        fd2 = (plain(p0 + ei + ej) - plain(p0 + ei - ej) - plain(p0 - ei + ej) + plain(p0 - ei - ej)) / (4 * h * h)
        assert out.d2(i, j).item() == pytest.approx(fd2, rel=1e-5, abs=1e-6)


def test_parameter_gradient_flows_through_every_component(rng):
    W0 = rng.standard_normal((4, 3))
    p0 = (0.2, -0.3, 0.5)
    mix = rng.standard_normal(10)

    def build(W):
        jets = jet_seed(*p0)
        comps = np.stack([j.comps.data for j in jets], axis=-1)
        out = Jet2(Tensor(comps)).linear(W).apply_activation("swish").sum(axis=0)
        return out.comps

    W = Tensor(W0.copy(), requires_grad=True)
    (build(W) * Tensor(mix)).sum().backward()
    num = numeric_grad(lambda w: float(build(Tensor(w)).data @ mix), [W0], 0)
    np.testing.assert_allclose(W.grad, num, rtol=1e-6, atol=1e-8)


def test_products_with_constants_and_tensors():
    t, z, x = jet_seed(0.5, 2.0, -1.0)
    f = 3.0 * t * z + 1.0 - x / 2.0
    assert f.value.item() == pytest.approx(3.0 * 0.5 * 2.0 + 1.0 + 0.5)
    np.testing.assert_allclose(f.d1.data, [6.0, 1.5, -0.5])
    assert f.d2(0, 1).item() == pytest.approx(3.0)
    assert f.d2(0, 0).item() == 0.0


def test_mismatched_pairs_rejected():
    a = jet_seed(0.0, 0.0, 0.0)[0]
    b = jet_seed(0.0, 0.0, 0.0, pairs=SPATIAL_DIAG)[0]
    with pytest.raises(ValueError):
        a + b


def test_hessian_marks_untracked_entries():
    t, z, x = jet_seed(0.1, 0.2, 0.3, pairs=SPATIAL_DIAG)
    H = (z * z + x).hessian()
    assert H[1, 1] == pytest.approx(2.0) and H[2, 2] == 0.0
    assert np.isnan(H[0, 1])
