"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line.

The desk-scale criteria (5, 6, 8) share one simulated dataset and one trained
model through module-scoped fixtures; expect roughly half an hour on one core.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
import sympy as sp

from flowsr.autodiff import Tensor
from flowsr.context import LatentContextGrid
from flowsr.data import (DatasetFormatError, load_dataset, make_dataset, save_dataset)
from flowsr.decoder import MLP, MLPConfig, query, vertex_weights
from flowsr.evaluation import (METRICS, dissipation, energy_spectrum, evaluate_all, frame_metrics,
                               mean_flow_energy, total_kinetic_energy)
from flowsr.jets import FULL_PAIRS, Jet2, jet_seed
from flowsr.physics import physics_params, rb_residuals
from flowsr.pipeline import (covered_truth, desk_discrete_configs, desk_train_config, discrete_report,
                             evaluate_model, noise_eval, trilinear_report)
from flowsr.solver import SimConfig, simulate_rb
from flowsr.training import (CheckpointFormatError, ContinuousSR, LossConfig, average_grads, compute_step,
                             data_parallel_train, draw_samples, load_checkpoint, prepare, save_checkpoint,
                             train)

from oracles import grad_check
from test_autodiff import CASES
from test_physics import AX, MANUFACTURED, _blocks, _symbolic_residuals

EPS = np.finfo(float).eps


@pytest.fixture
def emit(capsys):
    def _emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        return ok
    return _emit


# -- shared desk-scale fixtures -------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    hr = simulate_rb(SimConfig(Ra=1e5, Pr=1.0, nx=128, nz=32, n_frames=64))
    return make_dataset(hr, d_s=8, d_t=4)


@pytest.fixture(scope="module")
def desk_model(desk):
    t0 = time.perf_counter()
    ck = train(desk_train_config(desk), LossConfig(gamma=0.05), desk)
    return ck, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_model_report(desk, desk_model):
    t0 = time.perf_counter()
    rep = evaluate_model(desk_model[0].model, desk, meta={"gamma": 0.05})
    return rep, time.perf_counter() - t0


# -- criterion 1 --------------------------------------------------------------------------

def _fd_jet(f, p, h=1e-4):
    p = np.asarray(p, float)
    eye = np.eye(3) * h
    d1 = np.array([(f(p + e) - f(p - e)) / (2 * h) for e in eye])
    d2 = {}
    for i, j in FULL_PAIRS:
        ei, ej = eye[i], eye[j]
        d2[i, j] = (f(p + ei + ej) - f(p + ei - ej) - f(p - ei + ej) + f(p - ei - ej)) / (4 * h * h)
    return d1, d2


def test_criterion_1_autodiff(emit):
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for seed in range(2):
        for name in sorted(CASES):
            rng = np.random.default_rng(1000 * seed + len(name))
            build, arrays = CASES[name](rng)
            worst = max(worst, grad_check(build, arrays, rng))
            cases += 1

    rng = np.random.default_rng(1)
    W1, b1, W2 = rng.standard_normal((6, 3)), rng.standard_normal(6), rng.standard_normal((1, 6))

    def plain(p):
        h = W1 @ p + b1
        return (W2 @ (h / (1 + np.exp(-h))))[0] + math.sin(p[0] * p[1]) * math.exp(0.3 * p[2])

    jet_worst = 0.0
    for _ in range(10):
        p = rng.uniform(-1, 1, 3)
        comps = np.stack([j.comps.data for j in jet_seed(*p)], axis=-1)
        net = Jet2(Tensor(comps)).linear(Tensor(W1), Tensor(b1)).apply_activation("swish").linear(Tensor(W2))
        t, z, x = jet_seed(*p)
        out = net.sum(axis=0) + (t * z).sin() * (0.3 * x).exp()
        d1, d2 = _fd_jet(plain, p)
        scale1 = max(np.abs(d1).max(), 1e-8)
        jet_worst = max(jet_worst, np.abs(out.d1.data - d1).max() / scale1)
        scale2 = max(max(abs(v) for v in d2.values()), 1e-8)
        for (i, j), v in d2.items():
            jet_worst = max(jet_worst, abs(out.d2(i, j).item() - v) / scale2)
    dt = time.perf_counter() - t0
    ok = cases >= 50 and worst < 1e-4 and jet_worst < 1e-4 and dt < 60
    assert emit(1, ok, f"{cases} op cases, worst grad rel err {worst:.2e}; jet rel err {jet_worst:.2e}; "
                       f"{dt:.1f}s")


# -- criterion 2 ---------------------------------------------------------------------------

def test_criterion_2_decoder(emit):
    rng = np.random.default_rng(2)
    frac = rng.uniform(size=(100_000, 3))
    w = vertex_weights(frac)
    pou = max(abs(math.fsum(col) - 1.0) for col in w.T)

    # affine decoder on a multilinear latent field reproduces the field exactly
    spacing, origin = (0.5, 0.25, 0.2), (1.0, 0.0, -0.3)
    ext = (3, 4, 5)
    coeff = rng.standard_normal((4, 3, 2))
    axes = [origin[a] + spacing[a] * np.arange(ext[a]) for a in range(3)]

    def multilinear(t, z, x):
        return np.stack([(c[0, 0] + c[0, 1] * t) * (c[1, 0] + c[1, 1] * z) * (c[2, 0] + c[2, 1] * x)
                         for c in coeff])

    lat = multilinear(*np.meshgrid(*axes, indexing="ij"))
    grid = LatentContextGrid(Tensor(lat), spacing, origin)
    affine = MLP.build(MLPConfig(n_c=4, hidden=[], out_dim=2), seed=3)
    W = affine.params["mlp.l0.w"].data
    lo, hi = np.array(origin), np.array(grid.upper())
    pts = lo + (hi - lo) * rng.uniform(size=(500, 3))
    got = query(grid, affine, pts).y.data
    ref = multilinear(*pts.T).T @ W[:, 3:].T + affine.params["mlp.l0.b"].data
    exact = np.abs(got - ref).max()

    net = MLP.build(MLPConfig(n_c=4, hidden=[32, 32]), seed=4)
    grid = LatentContextGrid(Tensor(rng.standard_normal((4,) + ext)), spacing, origin)
    pts = lo + (hi - lo) * rng.uniform(0.05, 0.95, size=(20, 3))
    dec = query(grid, net, pts, want_derivs=True, pairs=FULL_PAIRS)
    d_worst = 0.0
    for n in range(len(pts)):
        def f(p, n=n):
            return query(grid, net, p[None]).y.data[0]
        d1, d2 = _fd_jet(f, pts[n], h=1e-4)
        d_worst = max(d_worst, np.abs(dec.d1.data[n] - d1.T).max() / np.abs(d1).max())
        for (i, j), v in d2.items():
            d_worst = max(d_worst, np.abs(dec.second(i, j).data[n] - v).max() / max(np.abs(v).max(), 1e-3))
    ok = pou <= EPS and exact < 1e-10 and d_worst < 1e-3
    assert emit(2, ok, f"partition of unity {pou / EPS:.1f} ulp; multilinear abs err {exact:.1e}; "
                       f"derivative rel err {d_worst:.1e}")


# -- criterion 3 ---------------------------------------------------------------------------

def test_criterion_3_residual_oracle(emit):
    rng = np.random.default_rng(3)
    pp = physics_params(1e5, 1.0)
    pts = rng.uniform(0, 1, size=(50, 3))
    y, d1, d2 = _blocks(MANUFACTURED, pts)
    got = rb_residuals(y, d1, d2, pp).numpy()
    ref = np.stack([np.broadcast_to(sp.lambdify(AX, r)(*pts.T), (50,))
                    for r in _symbolic_residuals(MANUFACTURED, pp)])
    err = np.abs(got - ref).max()
    conduction = {"p": AX[1] - AX[1] ** 2 / 2, "T": 1 - AX[1], "u": sp.Integer(0), "w": sp.Integer(0)}
    cond = np.abs(rb_residuals(*_blocks(conduction, pts), pp).numpy()).max()
    ok = err < 1e-10 and cond < 1e-12
    assert emit(3, ok, f"manufactured abs err {err:.1e} at 50 points; conduction residual {cond:.1e}")


# -- criterion 4 ---------------------------------------------------------------------------

def test_criterion_4_metric_identities(emit, desk):
    pp = physics_params(desk.Ra, desk.Pr)
    gt = covered_truth(desk)
    rep = evaluate_all(gt, gt.copy(), pp, periodic_x=False)
    identity = all(rep.scores[m].r2 == 1.0 and rep.scores[m].nmae_x100 == 0.0 for m in METRICS)

    nu = pp.nu_eff
    u, w = desk.hr.channel("u"), desk.hr.channel("w")
    dz, dx = desk.hr.spacing[1], desk.hr.spacing[2]
    formula, parseval = 0.0, 0.0
    for i in range(u.shape[0]):
        fm = frame_metrics(u[i], w[i], nu, dz, dx)
        formula = max(formula,
                      abs(fm.re_lambda - fm.u_rms * fm.taylor_lambda / nu) / fm.re_lambda,
                      abs(fm.tau_eta ** 2 * fm.dissipation - nu) / nu,
                      abs(fm.eta ** 4 * fm.dissipation - nu ** 3) / nu ** 3)
        e = total_kinetic_energy(u[i], w[i])
        parseval = max(parseval, abs(energy_spectrum(u[i], w[i]).sum() + mean_flow_energy(u[i], w[i]) - e))

    z = (np.arange(32) + 0.5) / 32
    shear_u = np.repeat(z[:, None], 64, axis=1)
    eps_shear = dissipation(shear_u, np.zeros_like(shear_u), 3e-3, 1 / 32, 1 / 16)
    ok = identity and formula < 1e-12 and parseval < 1e-10 and eps_shear == pytest.approx(3e-3, rel=1e-14)
    assert emit(4, ok, f"identity perfect={identity}; formula rel err {formula:.1e}; "
                       f"Parseval err {parseval:.1e}; shear eps/nu {eps_shear / 3e-3:.15f}")


# -- criterion 5 ---------------------------------------------------------------------------

def test_criterion_5_baseline_ordering(emit, desk, desk_model, desk_model_report):
    ck, t_model = desk_model
    rep_model, t_eval = desk_model_report
    t0 = time.perf_counter()
    rep_tri = trilinear_report(desk)
    cfg, dcfg = desk_discrete_configs(desk)
    rep_disc, _ = discrete_report(desk, cfg, dcfg)
    total = t_model + t_eval + time.perf_counter() - t0
    m, d, t = rep_model.avg_r2, rep_disc.avg_r2, rep_tri.avg_r2
    ok = None not in (m, d, t) and m > d > t and m >= 0.8 and total <= 1800
    assert emit(5, ok, f"avg R2 model {m}, baseline II {d}, baseline I {t}; {total / 60:.1f} min")


# -- criterion 6 ---------------------------------------------------------------------------

def test_criterion_6_gamma_effect(emit, desk, desk_model, desk_model_report):
    ck_low, _ = desk_model
    rep_low, _ = desk_model_report
    ck_high = train(desk_train_config(desk), LossConfig(gamma=1.0), desk)
    rep_high = evaluate_model(ck_high.model, desk, meta={"gamma": 1.0})
    finite = all(np.isfinite(ck.history.loss_total).all() for ck in (ck_low, ck_high))
    lo, hi = rep_low.avg_r2, rep_high.avg_r2
    ok = finite and lo is not None and hi is not None and lo >= hi
    assert emit(6, ok, f"avg R2 gamma=0.05 {lo}, gamma=1.0 {hi}; losses finite={finite}")


# -- criterion 7 ---------------------------------------------------------------------------

def test_criterion_7_data_parallel(emit, tiny_dataset, tiny_cfg):
    hr_n, lr_n, pp = prepare(tiny_dataset)
    model = ContinuousSR.build(tiny_cfg, tiny_dataset.norm_stats)
    loss_cfg = LossConfig(gamma=0.05)
    worst = 0.0
    for k in (2, 4):
        parts = [draw_samples(hr_n, lr_n, tiny_cfg, np.random.default_rng(100 + w), tiny_cfg.batch_windows)
                 for w in range(k)]
        per = [compute_step(model, lr_n, s, tiny_cfg, loss_cfg, pp).grads for s in parts]
        union = compute_step(model, lr_n, [x for s in parts for x in s], tiny_cfg, loss_cfg, pp).grads
        worst = max(worst, max(np.abs(a - b).max() for a, b in zip(average_grads(per), union)))

    identical = []

    def check(step, replicas):
        identical.append(all(np.array_equal(a.data, b.data)
                             for r in replicas[1:] for a, b in zip(replicas[0].parameters(), r.parameters())))

    cfg = replace(tiny_cfg, n_workers=2, epochs=10, samples_per_epoch=4 * tiny_cfg.batch_windows)
    data_parallel_train(cfg, loss_cfg, tiny_dataset, on_step=check)
    coherent = len(identical) == 20 and all(identical)

    cores = os.cpu_count() or 1
    if cores >= 4:
        from flowsr.pipeline import scale_bench
        rows = scale_bench(tiny_dataset, replace(tiny_cfg, points_per_window=512), loss_cfg, 4, steps=5)
        ratio = rows[3]["samples_per_s"] / rows[0]["samples_per_s"]
        speed_ok, speed = ratio >= 2.8, f"throughput(4)/throughput(1) {ratio:.2f}"
    else:
        speed_ok, speed = True, f"throughput ratio not measured on a {cores}-core host"
    ok = worst < 1e-12 and coherent and speed_ok
    assert emit(7, ok, f"all-reduce abs err {worst:.1e}; replicas identical over {len(identical)} steps="
                       f"{coherent}; {speed}")


# -- criterion 8 ---------------------------------------------------------------------------

def test_criterion_8_noise_robustness(emit, desk, desk_model):
    clean, noisy, tri = noise_eval(desk_model[0].model, desk, seed=0)
    vals = [r.avg_r2 for r in (clean, noisy, tri)]
    ok = None not in vals and all(math.isfinite(v) for v in vals) and vals[1] < vals[0] and vals[1] > vals[2]
    assert emit(8, ok, f"avg R2 clean {vals[0]}, noisy {vals[1]}, trilinear on noisy {vals[2]}")


# -- criterion 9 ---------------------------------------------------------------------------

def test_criterion_9_formats(emit, tmp_path, tiny_dataset, tiny_cfg):
    ds_path, ck_path = tmp_path / "d.bin", tmp_path / "m.ckpt"
    save_dataset(tiny_dataset, ds_path)
    back = load_dataset(ds_path)
    save_dataset(back, tmp_path / "d2.bin")
    ds_exact = (np.array_equal(back.hr.data, tiny_dataset.hr.data)
                and (tmp_path / "d2.bin").read_bytes() == ds_path.read_bytes())

    ck = train(tiny_cfg, LossConfig(), tiny_dataset)
    save_checkpoint(ck, ck_path)
    save_checkpoint(load_checkpoint(ck_path), tmp_path / "m2.ckpt")
    ck_exact = (tmp_path / "m2.ckpt").read_bytes() == ck_path.read_bytes()

    rejected = []
    for path, loader, err in ((ds_path, load_dataset, DatasetFormatError),
                              (ck_path, load_checkpoint, CheckpointFormatError)):
        raw = path.read_bytes()
        for kind, mutated in (("magic", b"BADMAGIC" + raw[8:]), ("checksum", raw[:-5] + bytes([raw[-5] ^ 1]) + raw[-4:])):
            path.write_bytes(mutated)
            try:
                loader(path)
                rejected.append(False)
            except err as exc:
                rejected.append(exc.kind == kind)
        path.write_bytes(raw)
    ok = ds_exact and ck_exact and all(rejected)
    assert emit(9, ok, f"dataset bit-exact={ds_exact}; checkpoint bit-exact={ck_exact}; "
                       f"corruptions rejected {sum(rejected)}/{len(rejected)}")
