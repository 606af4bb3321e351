"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import json
import time

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import expm

from greenmesh import analysis as A
from greenmesh import cli
from greenmesh import container
from greenmesh import data as D
from greenmesh import mesh as M
from greenmesh import neural as N
from greenmesh import operators as O
from greenmesh import solver as S
from greenmesh import training as T

# consistency probe setup
PROBE_DT = 5e-4
PROBE_FIELDS = 16
PROBE_HELD_OUT = 32
PROBE_CONFIG = T.TrainingConfig(
    q=2, batch_size=8, lr=3e-3, decay_step=210, epochs=300, noise=0.0, freeze_residual=True, seed=0
)

# desk generalization setup
DESK_SEED = 0
DESK_CONFIG = T.TrainingConfig(q=8, batch_size=8, lr=1e-3, decay_step=10, epochs=15, noise=1e-3, seed=0)
DESK_NET = N.NetConfig(width=32)


@pytest.fixture(scope="module")
def probe_run():
    m = M.build_perturbed_grid(16, 16, 0.3, 0)
    m = m.with_dirichlet(m.boundary)
    g = M.compute_edge_geometry(m)
    l = O.OperatorBundle(1.0).compose(m, g)
    trajs, _ = D.quadratic_family(m, PROBE_FIELDS, dt=PROBE_DT, seed=1, linear=False)
    model = T.HybridModel.create(m, g, l, PROBE_DT, seed=0, config=N.NetConfig(width=32))
    t0 = time.perf_counter()
    T.train(PROBE_CONFIG, trajs, model)
    return model, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_run():
    spec = D.PRESETS["laser-desk"]
    t0 = time.perf_counter()
    ds = D.generate_dataset(spec, 8, 4, 4, DESK_SEED)
    g = M.compute_edge_geometry(ds.mesh)
    l = spec.prior("geometric").compose(ds.mesh, g)
    model = T.HybridModel.create(ds.mesh, g, l, spec.dt, seed=0, config=DESK_NET)
    T.train(DESK_CONFIG, ds.train, model)
    return ds, model, time.perf_counter() - t0


@pytest.fixture(scope="module")
def damped_run():
    """Small checkpoint whose prior is coercive in the Euclidean norm, so the premise can hold."""
    m = M.build_perturbed_grid(8, 8, 0.3, 4)
    g = M.compute_edge_geometry(m)
    lap = O.assemble_laplacian(m, g)
    decay = A.log_norm(lap) + 50.0
    l = O.OperatorBundle(1.0, decay=decay).compose(m, g)
    truth_op = O.OperatorBundle(1.2, decay=decay).compose(m, g)
    rng = np.random.default_rng(0)
    st = S.GreenStepper(truth_op, 1e-3)
    data = [st.rollout(rng.normal(size=m.n_nodes), rng.normal(size=(10, m.n_nodes)), 9) for _ in range(4)]
    model = T.HybridModel.create(m, g, l, 1e-3, seed=0, config=N.NetConfig(width=8, correction_scale=1.0))
    T.train(T.TrainingConfig(q=4, epochs=5, lr=1e-3, noise=0.0), data, model)
    return model


def test_criterion_1_operator_exactness(report):
    t0 = time.perf_counter()
    m = M.build_perturbed_grid(24, 24, 0.3, 0)
    g = M.compute_edge_geometry(m)
    lap = O.assemble_laplacian(m, g)
    gx, gy = O.assemble_gradient(m, g, 0), O.assemble_gradient(m, g, 1)
    x, y = m.nodes.T
    lap_err = grad_err = 0.0
    for a, b, c in [(2.0, 3.0, -1.0), (-0.7, 1.9, 4.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)]:
        u = a * x + b * y + c
        lap_err = max(lap_err, np.max(np.abs((lap @ u)[m.interior])))
        grad_err = max(grad_err, np.max(np.abs((gx @ u)[m.interior] - a)), np.max(np.abs((gy @ u)[m.interior] - b)))
    elapsed = time.perf_counter() - t0
    ok = lap_err <= 1e-8 and grad_err <= 1e-6 and elapsed < 1.0
    report(1, "operator exactness", ok, f"laplacian {lap_err:.2e} <= 1e-8, gradient {grad_err:.2e} <= 1e-6, {elapsed:.2f}s < 1s")
    assert ok


def test_criterion_2_temporal_order(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 16
    s = rng.normal(size=(n, n)) / np.sqrt(n)
    k = rng.normal(size=(n, n)) / np.sqrt(n)
    l = -(s @ s.T) - 0.5 * np.eye(n) + (k - k.T)
    assert A.log_norm(sp.csr_matrix(l)) < 0
    u0 = rng.normal(size=n)
    horizon = 0.6
    exact = expm(horizon * l) @ u0
    dts = [1e-1, 3e-2, 1e-2, 3e-3]
    errs = []
    for dt in dts:
        steps = int(round(horizon / dt))
        st = S.GreenStepper(sp.csr_matrix(l), horizon / steps)
        errs.append(np.linalg.norm(st.rollout(u0, np.zeros((steps + 1, n)), steps).states[-1] - exact))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    elapsed = time.perf_counter() - t0
    ok = 1.8 <= slope <= 2.2 and elapsed < 5.0
    report(2, "temporal order", ok, f"log-log slope {slope:.3f} in [1.8, 2.2], {elapsed:.2f}s < 5s")
    assert ok


def test_criterion_3_factorize_once(report):
    t0 = time.perf_counter()
    spec = D.PRESETS["laser-desk"]
    m = spec.build_mesh()
    l = spec.bundle().compose(m, M.compute_edge_geometry(m))
    st = S.GreenStepper(l, spec.dt)
    rng = np.random.default_rng(0)
    u0, f = rng.normal(size=m.n_nodes), rng.normal(size=(201, m.n_nodes))
    t1 = time.perf_counter()
    cached = st.rollout(u0, f, 200).states
    t_cached = time.perf_counter() - t1
    t1 = time.perf_counter()
    fresh = st.rollout(u0, f, 200, refactorize_each_step=True).states
    t_fresh = time.perf_counter() - t1
    same = cached.tobytes() == fresh.tobytes()
    speedup = t_fresh / t_cached
    elapsed = time.perf_counter() - t0
    ok = same and speedup >= 5 and elapsed < 30 and m.n_nodes == 576
    report(3, "factorize once", ok, f"{m.n_nodes} nodes, bitwise identical={same}, speedup {speedup:.1f}x >= 5x, {elapsed:.2f}s < 30s")
    assert ok


def test_criterion_4_adjoint_exactness(report):
    t0 = time.perf_counter()
    m = M.build_perturbed_grid(4, 3, 0.2, 1)
    m = m.with_dirichlet(m.boundary & (m.nodes[:, 0] < 1e-12))
    g = M.compute_edge_geometry(m)
    l = O.assemble_laplacian(m, g)
    model = T.HybridModel.create(m, g, 0.1 * l, 0.1, seed=3, config=N.NetConfig(width=6, layers=2, residual_width=5))
    rng = np.random.default_rng(0)
    model.store.values += 0.3 * rng.standard_normal(model.store.size)
    q, n = 5, m.n_nodes
    src = rng.standard_normal((q, n))
    ref = S.GreenStepper(0.1 * l, 0.1, S.BoundarySpec.from_mesh(m)).rollout(rng.standard_normal(n), src, q - 1)
    traj = S.Trajectory(ref.states + 0.1 * rng.standard_normal((q, n)), src, 0.1)
    seg = T.segment(traj, q, 1, dirichlet=m.dirichlet_nodes)[0]

    def loss():
        return T.segment_forward_backward(model, model.stepper(), seg, seg.u0, "full")[0]

    model.store.zero_grad()
    _, tape = model.neural_data(tape=True)
    _, d_data, _ = T.segment_forward_backward(model, model.stepper(), seg, seg.u0, "full")
    model.net.backward(model.store, tape, d_data)
    grad = model.store.grads.copy()
    corr = np.flatnonzero(model.store.mask("corr."))
    idx = rng.choice(corr, 60, replace=False)
    h = 1e-5
    x = model.store.values
    errs = []
    for i in idx:
        old = x[i]
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            x[i] = old + step
            vals.append(loss())
        x[i] = old
        fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        errs.append(abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-12))
    worst = max(errs)
    elapsed = time.perf_counter() - t0
    ok = n <= 12 and len(idx) >= 50 and worst <= 1e-5 and elapsed < 30
    report(4, "adjoint exactness", ok, f"N={n}, {len(idx)} parameters, max relative error {worst:.2e} <= 1e-5, {elapsed:.2f}s < 30s")
    assert ok


def _dense_contraction(stepper):
    a, b = stepper.A.toarray(), stepper.B.toarray()
    b[stepper.dirichlet] = 0.0
    return np.linalg.norm(np.linalg.solve(a, b), 2)


def test_criterion_5_stability_diagnostics(report, probe_run, desk_run, damped_run):
    checkpoints = {"probe": probe_run[0], "desk": desk_run[1], "damped": damped_run}
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, model in checkpoints.items():
        rep = A.spectral_report(model.l_physics, model.l_neural(), model.stepper(), weights=model.mesh.control_volume, eigenvalues=False)
        chain = rep.mu2 <= -rep.eta + rep.sigma_neural + 1e-8
        implied = (not rep.premise_holds) or (rep.mu2 < 0 and rep.contraction < 1)
        report_ok = rep.mu2 >= 0 or rep.contraction < 1
        ok &= implied and chain and report_ok
        lines.append(f"{name}: sigma {rep.sigma_neural:.3g} eta {rep.eta:.3g} premise {rep.premise_holds} mu2 {rep.mu2:.3g} contraction {rep.contraction:.6f}")
    worst = 0.0
    rng = np.random.default_rng(5)
    for k in range(6):
        m = M.build_perturbed_grid(4 + k % 2, 4, 0.3, k)
        if k % 2:
            m = m.with_dirichlet(m.boundary)
        g = M.compute_edge_geometry(m)
        l = O.assemble_laplacian(m, g) + O.on_pattern(m.pattern, rng.normal(size=m.pattern.nnz))
        st = S.GreenStepper(l, 0.02, S.BoundarySpec.from_mesh(m))
        worst = max(worst, abs(A.contraction_norm(st) - _dense_contraction(st)))
    elapsed = time.perf_counter() - t0
    ok &= worst <= 1e-5 and elapsed < 10
    report(5, "stability diagnostics", ok, "; ".join(lines) + f"; dense oracle gap {worst:.1e} <= 1e-5 on N<=20, {elapsed:.2f}s < 10s")
    assert ok


def test_criterion_6_consistency_probe(report, probe_run):
    model, train_time = probe_run
    t0 = time.perf_counter()
    l_n = model.l_neural()
    _, coeffs = D.quadratic_family(model.mesh, PROBE_HELD_OUT, seed=2, linear=False)
    worse = 0
    for a, b, c, _, _, g0 in coeffs:
        p = A.truncation_probe(model.l_physics, l_n, model.mesh, A.quadratic_field(a, b, c, 0.0, 0.0, g0))
        worse += p.norm_hybrid > p.norm_physics
    quad = A.truncation_probe(model.l_physics, l_n, model.mesh, "quadratic")
    ratio = quad.norm_hybrid / quad.norm_physics
    elapsed = train_time + time.perf_counter() - t0
    ok = worse == 0 and ratio <= 0.9 and elapsed < 300
    report(
        6,
        "consistency probe",
        ok,
        f"hybrid <= physics on {PROBE_HELD_OUT - worse}/{PROBE_HELD_OUT} held-out fields, "
        f"x^2+y^2 residual ratio {ratio:.3f} <= 0.9, {elapsed:.0f}s < 300s",
    )
    assert ok


def test_criterion_7_desk_generalization(report, desk_run):
    ds, model, elapsed = desk_run
    st = model.stepper()
    base = T.HybridModel(ds.mesh, model.geometry, model.l_physics, model.dt, model.store, model.net, model.head)
    base.use_correction = base.use_residual = False
    bst = base.stepper()

    def mean_rne(m, stp, split):
        return float(np.mean([A.rne(m.predict(t, stp), t, skip_initial=True) for t in ds.split(split)]))

    seen = mean_rne(model, st, "test_seen")
    unseen = mean_rne(model, st, "test_unseen")
    baseline = mean_rne(base, bst, "test_unseen")
    a, b, c = unseen <= 0.10, unseen <= 0.5 * baseline, unseen <= 2 * seen
    ok = a and b and c and elapsed <= 1800
    report(
        7,
        "desk unseen-source generalization",
        ok,
        f"unseen {unseen:.4f} <= 0.10 ({a}); <= 0.5 x baseline {baseline:.4f} ({b}); "
        f"<= 2 x seen {seen:.4f} ({c}); {elapsed:.0f}s <= 1800s",
    )
    assert ok


def test_criterion_8_contracts(report, tmp_path):
    t0 = time.perf_counter()
    checks = {}
    u = np.arange(1.0, 7.0).reshape(2, 3)
    checks["metrics"] = (
        A.mse(u, u) == 0
        and A.mse(u + 1, u) == 1
        and A.mse(np.array([[1.0, 3.0]]), np.zeros((1, 2))) == 5
        and A.rne(u, u) == 0
        and A.rne(np.zeros_like(u), u) == 1
        and abs(A.rne(1.1 * u, u) - 0.1) <= 1e-12
    )
    m = M.build_perturbed_grid(6, 6, 0.3, 1)
    arrays = {"x": np.random.default_rng(0).normal(size=(4, 5)), "i": np.arange(7), "b": np.array([True, False])}
    raw = container.to_bytes({"k": "v"}, arrays)
    meta, back = container.from_bytes(raw)
    M.save_mesh(m, tmp_path / "m.dgm")
    m2 = M.load_mesh(tmp_path / "m.dgm")
    M.save_mesh(m2, tmp_path / "m2.dgm")
    checks["dgm1"] = container.to_bytes(meta, back) == raw and (tmp_path / "m.dgm").read_bytes() == (tmp_path / "m2.dgm").read_bytes()

    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"scenario": {"nx": 8, "ny": 8, "steps": 12, "ref_substeps": 4}}))
    gen = ["generate", "--seed", "3", "--config", str(cfg), "--n-train", "3", "--n-seen", "1", "--n-unseen", "1"]
    assert cli.main(gen + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(gen + ["--out", str(tmp_path / "b")]) == 0
    checks["generate"] = all(
        f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
        for f in (tmp_path / "a").iterdir()
        if f.name != "run_manifest_generate.json"
    )
    tr = ["train", "--data", str(tmp_path / "a"), "--epochs", "2", "--q", "4", "--width", "8", "--seed", "1"]
    assert cli.main(tr + ["--out", str(tmp_path / "t1")]) == 0
    assert cli.main(tr + ["--out", str(tmp_path / "t2")]) == 0

    def metrics(p):
        with open(p / "metrics.csv") as fh:
            return [{k: v for k, v in row.items() if k != "seconds"} for row in csv.DictReader(fh)]

    checks["train"] = (
        (tmp_path / "t1" / "checkpoint.dgm").read_bytes() == (tmp_path / "t2" / "checkpoint.dgm").read_bytes()
        and metrics(tmp_path / "t1") == metrics(tmp_path / "t2")
    )
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 60
    report(8, "metric and format contracts", ok, ", ".join(f"{k}={v}" for k, v in checks.items()) + f", {elapsed:.1f}s < 60s")
    assert ok
