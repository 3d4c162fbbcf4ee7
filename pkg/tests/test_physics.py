import numpy as np
import pytest
import sympy as sp

from flowsr.physics import (PhysicsParams, check_training_envelope, physics_params, rb_residuals,
                            register_residual, residual_operator, stack_residuals)

from oracles import grad_check

TS, ZS, XS = sp.symbols("t z x")
AX = (TS, ZS, XS)

MANUFACTURED = {
    "p": sp.sin(XS) * sp.cos(ZS) * sp.exp(-TS),
    "T": 1 - ZS + 0.1 * sp.sin(2 * XS + TS) * ZS * (1 - ZS),
    "u": sp.cos(TS) * sp.sin(XS) * ZS ** 2,
    "w": sp.exp(0.5 * TS) * sp.cos(XS) * (ZS - ZS ** 3),
}
ORDER = ("p", "T", "u", "w")


def _blocks(exprs, pts):
    """Value, first and spatial second derivative blocks of symbolic fields at points."""
    n = len(pts)
    y, d1, d2 = np.zeros((n, 4)), np.zeros((n, 4, 3)), np.zeros((n, 4, 2))
    for c, name in enumerate(ORDER):
        e = exprs[name]
        fns = [sp.lambdify(AX, e)] + [sp.lambdify(AX, sp.diff(e, a)) for a in AX] \
            + [sp.lambdify(AX, sp.diff(e, ZS, 2)), sp.lambdify(AX, sp.diff(e, XS, 2))]
        vals = [np.broadcast_to(np.asarray(f(*pts.T), float), (n,)) for f in fns]
        y[:, c] = vals[0]
        d1[:, c] = np.stack(vals[1:4], axis=1)
        d2[:, c] = np.stack(vals[4:6], axis=1)
    return y, d1, d2


def _symbolic_residuals(exprs, pp):
    p, T, u, w = (exprs[k] for k in ORDER)

    def adv(f):
        return sp.diff(f, TS) + u * sp.diff(f, XS) + w * sp.diff(f, ZS)

    def lap(f):
        return sp.diff(f, XS, 2) + sp.diff(f, ZS, 2)

    return [
        sp.diff(u, XS) + sp.diff(w, ZS),
        adv(u) + sp.diff(p, XS) - pp.r_star * lap(u),
        adv(w) + sp.diff(p, ZS) - T - pp.r_star * lap(w),
        adv(T) - pp.p_star * lap(T),
    ]


@pytest.mark.parametrize("Ra,Pr", [(1e5, 1.0), (1e6, 0.7), (2e4, 4.0)])
def test_residuals_match_symbolic_manufactured_solution(Ra, Pr, rng):
    pp = physics_params(Ra, Pr)
    pts = rng.uniform(0, 1, size=(16, 3))
    y, d1, d2 = _blocks(MANUFACTURED, pts)
    got = rb_residuals(y, d1, d2, pp).numpy()
    ref = np.stack([np.broadcast_to(sp.lambdify(AX, r)(*pts.T), (16,))
                    for r in _symbolic_residuals(MANUFACTURED, pp)])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conduction_state_has_zero_residual(rng):
    conduction = {"p": ZS - ZS ** 2 / 2, "T": 1 - ZS, "u": sp.Integer(0), "w": sp.Integer(0)}
    y, d1, d2 = _blocks(conduction, rng.uniform(0, 1, size=(10, 3)))
    np.testing.assert_allclose(rb_residuals(y, d1, d2, physics_params(1e5, 1.0)).numpy(), 0, atol=1e-14)


def test_source_term_cancels_residual(rng):
    pp = physics_params(1e5, 0.7)
    y, d1, d2 = _blocks(MANUFACTURED, rng.uniform(0, 1, size=(6, 3)))
    res = rb_residuals(y, d1, d2, pp)
    np.testing.assert_allclose(rb_residuals(y, d1, d2, pp, source=res).numpy(), 0, atol=1e-14)


def test_residual_gradients_match_finite_differences(rng):
    pp = physics_params(1e5, 1.0)
    arrays = [rng.standard_normal((5, 4)), rng.standard_normal((5, 4, 3)), rng.standard_normal((5, 4, 2))]
    assert grad_check(lambda y, a, b: stack_residuals(rb_residuals(y, a, b, pp)), arrays, rng) < 1e-6


def test_diffusion_coefficients():
    pp = PhysicsParams(1e6, 4.0)
    assert pp.p_star == pytest.approx(1 / np.sqrt(4e6))
    assert pp.r_star == pytest.approx(1 / np.sqrt(2.5e5))


@pytest.mark.parametrize("Ra,Pr", [(0.0, 1.0), (1e5, -1.0)])
def test_invalid_parameters(Ra, Pr):
    with pytest.raises(ValueError):
        physics_params(Ra, Pr)


def test_shape_validation():
    with pytest.raises(ValueError):
        rb_residuals(np.zeros((3, 4)), np.zeros((3, 4, 2)), np.zeros((3, 4, 2)), physics_params(1e5, 1))
    with pytest.raises(ValueError):
        rb_residuals(np.zeros((3, 4)), None, None, physics_params(1e5, 1))


def test_registry_round_trip():
    assert residual_operator("rayleigh_benard_2d") is rb_residuals
    register_residual("test_zero", lambda y, d1, d2, params, source=None: [y[:, 0] * 0.0])
    assert residual_operator("test_zero")(np.ones((2, 4)), None, None, None)[0].shape == (2,)
    with pytest.raises(KeyError):
        residual_operator("nope")


@pytest.mark.parametrize("Ra,Pr,inside", [(1e5, 1.0, True), (1e3, 1.0, False), (1e6, 20.0, False)])
def test_training_envelope(Ra, Pr, inside):
    assert check_training_envelope(physics_params(Ra, Pr)) is inside
