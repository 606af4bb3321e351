import csv

import numpy as np
import pytest

from greenmesh import mesh as M
from greenmesh import neural as N
from greenmesh import operators as O
from greenmesh import training as T
from greenmesh.solver import BoundarySpec, Trajectory


def make_traj(n_steps, n, seed=0, dt=0.1):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.normal(size=(n_steps, n)), rng.normal(size=(n_steps, n)), dt)


def small_model(dirichlet=True, seed=0, width=4):
    m = M.build_perturbed_grid(4, 4, 0.3, 2)
    if dirichlet:
        m = m.with_dirichlet(m.boundary & (m.nodes[:, 0] < 1e-12))
    g = M.compute_edge_geometry(m)
    l = O.OperatorBundle(1.0).compose(m, g)
    return T.HybridModel.create(m, g, l, 0.01, seed=seed, config=N.NetConfig(width=width, layers=1))


def physics_data(model, n_traj=3, steps=8, seed=0):
    rng = np.random.default_rng(seed)
    st = model.stepper(model.l_physics)
    out = []
    for _ in range(n_traj):
        f = rng.normal(size=(steps, model.mesh.n_nodes))
        out.append(st.rollout(rng.normal(size=model.mesh.n_nodes), f, steps - 1))
    return out


@pytest.mark.parametrize("t,q,stride,count", [(10, 10, 1, 1), (10, 5, 5, 2), (120, 8, 1, 113)])
def test_segment_counts(t, q, stride, count):
    segs = T.segment(make_traj(t, 3), q, stride)
    assert len(segs) == count
    assert all(s.q == q for s in segs)


def test_segment_disjoint_windows():
    tr = make_traj(10, 3)
    a, b = T.segment(tr, 5, 5)
    np.testing.assert_array_equal(a.targets, tr.states[:5])
    np.testing.assert_array_equal(b.targets, tr.states[5:])


def test_segment_errors():
    with pytest.raises(ValueError):
        T.segment(make_traj(4, 2), 5)
    with pytest.raises(ValueError):
        T.segment(make_traj(4, 2), 2, 0)


def test_noise_examples():
    u = np.arange(5.0)
    np.testing.assert_array_equal(T.inject_noise(u, 0.0, 1), u)
    np.testing.assert_array_equal(T.inject_noise(u, 0.1, 3), T.inject_noise(u, 0.1, 3))
    z = T.inject_noise(np.zeros(10_000), 0.2, 4)
    assert abs(np.linalg.norm(z) / 100 - 0.2) <= 0.05 * 0.2
    pinned = T.inject_noise(u, 1.0, 5, dirichlet=np.array([0, 4]))
    assert pinned[0] == 0 and pinned[4] == 4
    with pytest.raises(ValueError):
        T.inject_noise(u, -1.0, 0)


def test_loss_examples(rng):
    u = rng.normal(size=(4, 7))
    assert T.segment_loss(u, u[1], u[-1]) == 0.0
    assert T.segment_loss(u + 1, u[1], u[-1]) == pytest.approx(14.0)
    v = rng.normal(size=7)
    pred = u.copy()
    pred[1] += v
    assert T.segment_loss(pred, u[1], u[-1]) == pytest.approx(v @ v)


def test_adam_examples():
    p = np.array([1.0, 2.0])
    opt = T.OptimizerState.zeros(2)
    T.adam_step(p, np.zeros(2), opt, 0.1)
    np.testing.assert_array_equal(p, [1.0, 2.0])
    assert opt.step == 1
    p = np.array([0.0])
    T.adam_step(p, np.array([1.0]), T.OptimizerState.zeros(1), 1e-3)
    assert p[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_deterministic_and_masked(rng):
    grads = rng.normal(size=(5, 3))
    runs = []
    for _ in range(2):
        p, opt = np.ones(3), T.OptimizerState.zeros(3)
        for g in grads:
            T.adam_step(p, g, opt, 0.01, mask=np.array([True, False, True]))
        runs.append(p)
    np.testing.assert_array_equal(runs[0], runs[1])
    assert runs[0][1] == 1.0


def test_adam_skips_nonfinite():
    p, opt = np.ones(2), T.OptimizerState.zeros(2)
    assert not T.adam_step(p, np.array([np.nan, 1.0]), opt, 0.1)
    assert opt.skipped == 1 and opt.step == 0
    np.testing.assert_array_equal(p, 1.0)


def test_lr_schedule():
    cfg = T.TrainingConfig(lr=1.0, decay_step=10, decay_rate=0.5)
    assert [cfg.lr_at(e) for e in (0, 9, 10, 25)] == [1.0, 1.0, 0.5, 0.25]


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainingConfig(q=1)
    with pytest.raises(ValueError):
        T.TrainingConfig(pushforward="partial")
    assert T.TrainingConfig(q=8).resolved_stride == 4


def test_pushforward_modes_same_loss():
    model = small_model()
    model.store.values[:] = 0.05 * np.random.default_rng(1).standard_normal(model.store.size)
    tr = physics_data(model, 1)[0]
    seg = T.segment(tr, 6, 1, dirichlet=model.mesh.dirichlet_nodes)[0]
    st = model.stepper()
    a = T.segment_forward_backward(model, st, seg, seg.u0, "full")
    b = T.segment_forward_backward(model, st, seg, seg.u0, "detached")
    assert a[0] == b[0]
    assert not np.allclose(a[1], b[1])


def _total_loss(model, seg):
    return T.segment_forward_backward(model, model.stepper(), seg, seg.u0, "full")[0]


@pytest.mark.parametrize("dirichlet", [True, False])
def test_end_to_end_gradient_fd(dirichlet):
    model = small_model(dirichlet)
    rng = np.random.default_rng(3)
    model.store.values[:] = 0.1 * rng.standard_normal(model.store.size)
    tr = physics_data(model, 1, steps=6)[0]
    seg = T.segment(tr, 5, 1, dirichlet=model.mesh.dirichlet_nodes)[0]
    model.store.zero_grad()
    data, tape = model.neural_data(tape=True)
    _, d_data, _ = T.segment_forward_backward(model, model.stepper(), seg, seg.u0, "full")
    model.net.backward(model.store, tape, d_data)
    grad = model.store.grads.copy()
    x = model.store.values
    for i in rng.choice(model.store.size, 30, replace=False):
        old = x[i]
        vals = []
        for h in (2e-5, 1e-5, -1e-5, -2e-5):
            x[i] = old + h
            vals.append(_total_loss(model, seg))
        x[i] = old
        fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12e-5)
        assert abs(fd - grad[i]) <= 1e-5 * max(abs(fd), 1e-4 * np.abs(grad).max())


def test_frozen_loss_constant():
    model = small_model()
    data = physics_data(model, 3)
    res = T.train(T.TrainingConfig(q=4, epochs=3, noise=0.01, freeze_neural=True), data, model)
    losses = [r["train_loss"] for r in res.metrics]
    assert losses[0] == losses[1] == losses[2]


def test_freeze_neural_matches_baseline():
    model = small_model()
    data = physics_data(model, 3)
    res = T.train(T.TrainingConfig(q=4, epochs=2, freeze_neural=True), data, model)
    assert res.best_val_rne == res.baseline_val_rne
    assert all(r["val_rne"] == res.baseline_val_rne for r in res.metrics)


def test_train_deterministic_and_metrics(tmp_path):
    outs = []
    for k in range(2):
        model = small_model()
        truth = physics_data(model, 3)
        model.l_physics = 1.05 * model.l_physics
        res = T.train(
            T.TrainingConfig(q=4, epochs=3, lr=1e-3, seed=4),
            truth,
            model,
            metrics_path=tmp_path / f"m{k}.csv",
            checkpoint_path=tmp_path / f"c{k}.dgm",
        )
        outs.append(res)
    assert outs[0].store.values.tobytes() == outs[1].store.values.tobytes()
    with open(tmp_path / "m0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == T.METRIC_FIELDS and len(rows) == 3
    assert outs[0].best_val_rne <= outs[0].baseline_val_rne
    assert (tmp_path / "c0.dgm").read_bytes() == (tmp_path / "c1.dgm").read_bytes()


def test_training_reduces_operator_error():
    model = small_model(width=8)
    truth = physics_data(model, 4)
    model.l_physics = 0.8 * model.l_physics
    res = T.train(T.TrainingConfig(q=4, epochs=15, lr=3e-3, noise=0.0, batch_size=4), truth, model)
    assert res.best_val_rne < 0.7 * res.baseline_val_rne


def test_checkpoint_mesh_mismatch(tmp_path):
    model = small_model()
    model.save(tmp_path / "c.dgm")
    other = M.build_perturbed_grid(4, 4, 0.3, 9)
    g = M.compute_edge_geometry(other)
    with pytest.raises(T.MeshMismatchError):
        T.HybridModel.load(tmp_path / "c.dgm", other, g, O.OperatorBundle(1.0).compose(other, g))
    back = T.HybridModel.load(tmp_path / "c.dgm", model.mesh, model.geometry, model.l_physics, model.bc)
    assert back.store.values.tobytes() == model.store.values.tobytes()


def test_run_metadata_fields(tmp_path):
    model = small_model()
    cfg = T.TrainingConfig()
    meta = T.run_metadata(cfg, model)
    assert meta["adam"] == {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    assert meta["training"]["pushforward"] == "full"
    T.save_run_metadata(meta, tmp_path / "r.json")
    assert (tmp_path / "r.json").exists()


def test_divergence_reports_last_good():
    model = small_model()
    data = physics_data(model, 3)
    data[0].sources[3, 5] = np.nan
    with pytest.raises(T.TrainingDiverged) as exc:
        T.train(T.TrainingConfig(q=4, epochs=2), data, model)
    assert exc.value.last_good is not None
