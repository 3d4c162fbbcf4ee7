import numpy as np
import pytest

from flowsr.solver import DIVERGENCE_TOL, CFLError, RBSolver, SimConfig, simulate_rb


@pytest.fixture
def small_cfg():
    return SimConfig(Ra=1e5, Pr=1.0, nx=32, nz=16, Lx=2.0, t_final=0.5, dt=0.005,
                     snapshot_every=10, n_frames=8, perturbation=1e-2)


def _neumann_laplacian(s, p):
    gx, gz = s._grad(p)
    return s.divergence(gx, gz)


def test_poisson_solve_inverts_discrete_laplacian(small_cfg, rng):
    s = RBSolver(small_cfg)
    rhs = rng.standard_normal((s.nz, s.nx))
    rhs -= rhs.mean()
    np.testing.assert_allclose(_neumann_laplacian(s, s._poisson(rhs)), rhs, atol=1e-9)


def test_projection_removes_divergence(small_cfg, rng):
    s = RBSolver(small_cfg)
    u = rng.standard_normal((s.nz, s.nx))
    w = rng.standard_normal((s.nz + 1, s.nx))
    w[0] = w[-1] = 0.0
    un, wn, _ = s.project(u, w)
    assert np.abs(s.divergence(un, wn)).max() < DIVERGENCE_TOL
    np.testing.assert_array_equal(wn[[0, -1]], 0.0)


def test_steps_stay_divergence_free(small_cfg):
    s = RBSolver(small_cfg)
    for _ in range(20):
        assert s.step() < DIVERGENCE_TOL


def test_conduction_is_a_steady_state():
    cfg = SimConfig(nx=16, nz=8, Lx=2.0, t_final=0.1, dt=0.01, snapshot_every=1, n_frames=None,
                    perturbation=0.0)
    s = RBSolver(cfg)
    T0 = s.T.copy()
    for _ in range(10):
        s.step()
    np.testing.assert_allclose(s.T, T0, atol=1e-12)
    assert np.abs(s.u).max() < 1e-12 and np.abs(s.w).max() < 1e-12


def test_simulation_output_layout(small_cfg):
    f = simulate_rb(small_cfg)
    assert f.channels == ("p", "T", "u", "w")
    assert f.shape == (4, 8, 16, 32)
    assert f.spacing == pytest.approx((0.05, 1 / 16, 2 / 32))
    assert f.origin[0] == pytest.approx(small_cfg.t_final - 7 * 0.05)
    assert np.isfinite(f.data).all()
    T = f.channel("T")
    assert T.min() > -0.1 and T.max() < 1.1


def test_simulation_is_deterministic(small_cfg):
    np.testing.assert_array_equal(simulate_rb(small_cfg).data, simulate_rb(small_cfg).data)


@pytest.mark.parametrize("overrides", [{"dt": 0.5}, {"nx": 4}, {"n_frames": 1000}, {"dt": -1.0}])
def test_invalid_configs_rejected(small_cfg, overrides):
    cfg = SimConfig(**{**small_cfg.__dict__, **overrides})
    with pytest.raises(ValueError):
        cfg.validate()


def test_cfl_error_is_value_error():
    assert issubclass(CFLError, ValueError)
    with pytest.raises(CFLError):
        SimConfig(nx=256, nz=64, dt=0.1, snapshot_every=1, n_frames=4).validate()
