"""Segmented rollout training of the hybrid operator and residual head.

The forward pass of one segment is a short Green-step rollout on
``L = L_physics + L_neural`` followed each step by the residual correction.
Gradients flow back through the cached LU factors (transpose solves), into
the pattern entries of ``L_neural`` and from there into the network.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .analysis import rne
from .mesh import EdgeGeometry, Mesh
from .neural import (
    CorrectionNet,
    NetConfig,
    ParamStore,
    ResidualHead,
    init_params,
    load_checkpoint,
    save_checkpoint,
    spectral_penalty,
)
from .operators import compose_hybrid, on_pattern
from .solver import BoundarySpec, GreenStepper, NonFiniteError, Trajectory

log = logging.getLogger(__name__)

ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


@dataclass(frozen=True)
class TrainingConfig:
    q: int = 8
    batch_size: int = 8
    lr: float = 5e-4
    decay_step: int = 200
    decay_rate: float = 0.1
    epochs: int = 400
    noise: float = 1e-2
    stride: int | None = None
    pushforward: str = "full"
    spectral_weight: float = 0.0
    spectral_gamma: float = 1.0
    seed: int = 0
    freeze_neural: bool = False
    freeze_correction: bool = False
    freeze_residual: bool = False
    validate_every: int = 1

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("q must be >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (self.lr > 0 and self.decay_rate > 0 and self.decay_step > 0):
            raise ValueError("lr, decay_rate and decay_step must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.pushforward not in ("full", "detached"):
            raise ValueError(f"pushforward must be 'full' or 'detached', got {self.pushforward!r}")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def resolved_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.q // 2)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_rate ** (epoch // self.decay_step)


@dataclass
class Segment:
    u0: np.ndarray
    sources: np.ndarray
    targets: np.ndarray
    boundary: np.ndarray | None
    start: int
    traj_index: int = 0
    scale: float = 1.0

    @property
    def q(self) -> int:
        return self.sources.shape[0]

    @property
    def target_first(self) -> np.ndarray:
        return self.targets[1]

    @property
    def target_last(self) -> np.ndarray:
        return self.targets[-1]


def segment(traj: Trajectory, q: int, stride: int = 1, *, dirichlet: np.ndarray | None = None, traj_index: int = 0) -> list[Segment]:
    """Windows of ``q`` consecutive states starting at 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if q < 2:
        raise ValueError("q must be >= 2")
    t = traj.n_steps
    if q > t:
        raise ValueError(f"segment length {q} exceeds trajectory length {t}")
    scale = float(np.std(traj.states)) or 1.0
    out = []
    for s in range(0, t - q + 1, stride):
        bnd = None if dirichlet is None or len(dirichlet) == 0 else traj.states[s : s + q][:, dirichlet]
        out.append(
            Segment(
                u0=traj.states[s].copy(),
                sources=traj.sources[s : s + q],
                targets=traj.states[s : s + q],
                boundary=bnd,
                start=s,
                traj_index=traj_index,
                scale=scale,
            )
        )
    return out


def inject_noise(u0: np.ndarray, amplitude: float, seed, dirichlet: np.ndarray | None = None) -> np.ndarray:
    """``u0 + amplitude * xi`` with standard normal ``xi``; Dirichlet nodes untouched."""
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    u0 = np.asarray(u0, dtype=np.float64)
    if amplitude == 0:
        return u0.copy()
    rng = np.random.default_rng(seed)
    out = u0 + amplitude * rng.standard_normal(u0.shape)
    if dirichlet is not None and len(dirichlet):
        out[dirichlet] = u0[dirichlet]
    return out


def segment_loss(predicted: np.ndarray, target_first: np.ndarray, target_last: np.ndarray) -> float:
    """``|u_hat^1 - u^1|^2 + |u_hat^{Q-1} - u^{Q-1}|^2``; ``predicted`` holds states 0..Q-1."""
    predicted = np.asarray(predicted)
    if predicted.ndim != 2 or predicted.shape[0] < 2:
        raise ValueError("predictions must cover at least the first supervised step")
    if predicted.shape[1:] != np.shape(target_first) or predicted.shape[1:] != np.shape(target_last):
        raise ValueError("prediction and target lengths differ")
    return float(np.sum((predicted[1] - target_first) ** 2) + np.sum((predicted[-1] - target_last) ** 2))


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, opt: OptimizerState, lr: float, mask: np.ndarray | None = None) -> bool:
    """In-place bias-corrected Adam update. Returns False (and counts a skip) on non-finite gradients.

    ``mask`` selects trainable entries; the rest are left untouched.
    """
    if params.shape != grads.shape or opt.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        opt.skipped += 1
        return False
    opt.step += 1
    g = grads if mask is None else np.where(mask, grads, 0.0)
    opt.m *= opt.beta1
    opt.m += (1 - opt.beta1) * g
    opt.v *= opt.beta2
    opt.v += (1 - opt.beta2) * g * g
    mhat = opt.m / (1 - opt.beta1**opt.step)
    vhat = opt.v / (1 - opt.beta2**opt.step)
    upd = lr * mhat / (np.sqrt(vhat) + opt.eps)
    if mask is not None:
        upd = np.where(mask, upd, 0.0)
    params -= upd
    return True


class MeshMismatchError(ValueError):
    """A checkpoint does not belong to the mesh it is being loaded for."""


class HybridModel:
    """Physics operator plus learned correction and residual head on one mesh."""

    def __init__(
        self,
        mesh: Mesh,
        geometry: EdgeGeometry,
        l_physics: sp.spmatrix,
        dt: float,
        store: ParamStore,
        net: CorrectionNet,
        head: ResidualHead,
        bc: BoundarySpec | None = None,
    ):
        self.mesh = mesh
        self.geometry = geometry
        self.l_physics = on_pattern(mesh.pattern, _pattern_values(l_physics, mesh))
        self.dt = float(dt)
        self.store = store
        self.net = net
        self.head = head
        self.bc = bc or BoundarySpec.from_mesh(mesh)
        self.use_correction = True
        self.use_residual = True
        self.extra_meta: dict = {}

    @classmethod
    def create(cls, mesh, geometry, l_physics, dt, *, seed=0, config: NetConfig | None = None, scale=1.0, bc=None):
        config = config or NetConfig()
        if config.correction_scale is None:
            diag = np.abs(sp.csr_matrix(l_physics).diagonal())
            config = NetConfig(**{**asdict(config), "correction_scale": 0.1 * float(np.mean(diag)) or 1.0})
        store, net, head = init_params(seed, config.width, config.layers, scale, mesh=mesh, geometry=geometry, config=config)
        return cls(mesh, geometry, l_physics, dt, store, net, head, bc)

    @property
    def config(self) -> NetConfig:
        return self.net.config

    def neural_data(self, tape: bool = False):
        if not self.use_correction:
            z = np.zeros(self.mesh.pattern.nnz)
            return (z, None) if tape else z
        data, tp = self.net.forward(self.store)
        return (data, tp) if tape else data

    def l_neural(self) -> sp.csr_matrix:
        return on_pattern(self.mesh.pattern, self.neural_data())

    def operator(self) -> sp.csr_matrix:
        return compose_hybrid(self.l_physics, self.l_neural())

    def stepper(self, l: sp.csr_matrix | None = None) -> GreenStepper:
        return GreenStepper(self.operator() if l is None else l, self.dt, self.bc)

    def residual(self, u):
        if not self.use_residual:
            return np.zeros(self.mesh.n_nodes), None
        return self.head.forward(self.store, u)

    def rollout(self, u0, sources, steps, *, boundary=None, stepper=None) -> np.ndarray:
        """Autoregressive prediction of states 0..steps."""
        st = stepper or self.stepper()
        d = st.dirichlet
        out = np.empty((steps + 1, self.mesh.n_nodes))
        u = np.array(u0, dtype=np.float64)
        if boundary is not None and len(d):
            u[d] = boundary[0]
        out[0] = u
        for k in range(steps):
            g = boundary[k + 1] if boundary is not None and len(d) else None
            du, _ = self.residual(u)
            try:
                u = st.step(u, sources[k], sources[k + 1], g_next=g) + du
            except (NonFiniteError, ValueError) as exc:
                raise type(exc)(f"step {k}: {exc}") from exc
            out[k + 1] = u
        return out

    def predict(self, traj: Trajectory, stepper=None) -> Trajectory:
        d = self.mesh.dirichlet_nodes
        bnd = traj.states[:, d] if len(d) else None
        states = self.rollout(traj.states[0], traj.sources, traj.n_steps - 1, boundary=bnd, stepper=stepper)
        return Trajectory(states, traj.sources.copy(), traj.dt, dict(traj.meta))

    def hyperparameters(self) -> dict:
        return {"net": asdict(self.config), "dt": self.dt}

    def save(self, path, seed: int = 0, extra: dict | None = None) -> str:
        meta = {"mesh_checksum": self.mesh.checksum(), **self.extra_meta}
        meta.update(extra or {})
        return save_checkpoint(self.store, path, self.hyperparameters(), seed, meta)

    @classmethod
    def load(cls, path, mesh, geometry, l_physics, bc=None) -> "HybridModel":
        store, meta = load_checkpoint(path)
        if meta.get("mesh_checksum") not in (None, mesh.checksum()):
            raise MeshMismatchError(f"{path} was trained on a different mesh")
        hyper = meta["hyperparameters"]
        config = NetConfig(**hyper["net"])
        net = CorrectionNet(config, mesh, geometry)
        head = ResidualHead(config, mesh, geometry)
        if store.segments.keys() != {**net.shapes(), **head.shapes()}.keys():
            raise ValueError("checkpoint segments do not match the network layout")
        model = cls(mesh, geometry, l_physics, hyper["dt"], store, net, head, bc)
        model.extra_meta = {k: meta[k] for k in ("prior",) if k in meta}
        return model


def _pattern_values(op, mesh: Mesh) -> np.ndarray:
    from .operators import pattern_data

    return pattern_data(op, mesh.pattern)


def segment_forward_backward(
    model: HybridModel, stepper: GreenStepper, seg: Segment, u0: np.ndarray, mode: str = "full", *, train_residual: bool = True
):
    """Loss of one segment plus the gradient w.r.t. the hybrid-operator data.

    Residual-head parameter gradients are accumulated directly into the store.
    Returns ``(loss, d_data, predicted)``.
    """
    pat = model.mesh.pattern
    q = seg.q
    n = model.mesh.n_nodes
    d = stepper.dirichlet
    states = np.empty((q, n))
    green = np.empty((q, n))
    tapes = []
    u = np.array(u0, dtype=np.float64)
    if seg.boundary is not None and len(d):
        u[d] = seg.boundary[0]
    states[0] = u
    for k in range(q - 1):
        g = seg.boundary[k + 1] if seg.boundary is not None and len(d) else None
        ut = stepper.step(u, seg.sources[k], seg.sources[k + 1], g_next=g)
        du, tape = model.residual(u)
        green[k + 1] = ut
        tapes.append(tape)
        u = ut + du
        states[k + 1] = u
    loss = segment_loss(states, seg.target_first, seg.target_last)
    seed_grad = np.zeros((q, n))
    seed_grad[1] += 2.0 * (states[1] - seg.target_first)
    seed_grad[q - 1] += 2.0 * (states[q - 1] - seg.target_last)
    d_data = np.zeros(pat.nnz)
    half = 0.5 * model.dt
    lam = np.zeros(n)
    for k in range(q - 2, -1, -1):
        lam = seed_grad[k + 1] + (lam if mode == "full" else 0.0)
        g_b = stepper.solve_adjoint(lam)
        if len(d):
            g_b[d] = 0.0
        d_data += half * g_b[pat.rows] * (green[k + 1] + states[k])[pat.indices]
        lam_prev = stepper.B.T @ g_b
        if tapes[k] is not None and (train_residual or mode == "full"):
            lam_prev = lam_prev + model.head.backward(model.store, tapes[k], lam)
        lam = lam_prev
    return loss, d_data, states


@dataclass
class TrainResult:
    store: ParamStore
    metrics: list[dict]
    best_epoch: int
    best_val_rne: float
    baseline_val_rne: float | None = None
    skipped_steps: int = 0
    config: dict = field(default_factory=dict)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, last_good: ParamStore | None):
        super().__init__(msg)
        self.last_good = last_good


METRIC_FIELDS = ["epoch", "train_loss", "val_rne", "lr", "seconds"]


def write_metrics(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})


def _trainable_mask(store: ParamStore, cfg: TrainingConfig) -> np.ndarray:
    mask = np.ones(store.size, dtype=bool)
    if cfg.freeze_neural or cfg.freeze_correction:
        mask &= ~store.mask("corr.")
    if cfg.freeze_neural or cfg.freeze_residual:
        mask &= ~store.mask("res.")
    return mask


def train(
    config: TrainingConfig,
    dataset: list[Trajectory],
    model: HybridModel,
    *,
    validation: list[Trajectory] | None = None,
    metrics_path=None,
    checkpoint_path=None,
    progress=None,
) -> TrainResult:
    """Optimize ``model.store`` in place and return the best parameters by validation RNE.

    When ``validation`` is None the last trajectory of ``dataset`` is held out.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if validation is None:
        if len(dataset) < 2:
            validation, train_set = list(dataset), list(dataset)
        else:
            validation, train_set = dataset[-1:], dataset[:-1]
    else:
        train_set = list(dataset)
    d = model.mesh.dirichlet_nodes
    segs = []
    for ti, tr in enumerate(train_set):
        segs.extend(segment(tr, config.q, config.resolved_stride, dirichlet=d, traj_index=ti))
    ss = np.random.SeedSequence(config.seed)
    noise_seeds = [np.random.SeedSequence([config.seed, 1, i]) for i in range(len(segs))]
    shuffle_rng = np.random.default_rng(ss.spawn(1)[0])
    inputs = [inject_noise(s.u0, config.noise * s.scale, noise_seeds[i], d) for i, s in enumerate(segs)]

    mask = _trainable_mask(model.store, config)
    frozen_all = not mask.any()
    corr_frozen = config.freeze_neural or config.freeze_correction
    res_frozen = config.freeze_neural or config.freeze_residual
    fixed_data = model.neural_data() if corr_frozen else None
    opt = OptimizerState.zeros(model.store.size)

    def validate():
        st = model.stepper()
        return float(np.mean([rne(model.predict(v, st), v, skip_initial=True) for v in validation]))

    best = model.store.copy()
    best_rne = validate()
    baseline = best_rne
    best_epoch = -1
    last_good = model.store.copy()
    rows: list[dict] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(len(segs))
        seg_loss = np.zeros(len(segs))
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            model.store.zero_grad()
            data, tape = (fixed_data, None) if corr_frozen else model.neural_data(tape=True)
            l = compose_hybrid(model.l_physics, on_pattern(model.mesh.pattern, data))
            try:
                st = model.stepper(l)
                d_data = np.zeros(model.mesh.pattern.nnz)
                for i in batch:
                    loss, g, _ = segment_forward_backward(
                        model, st, segs[i], inputs[i], config.pushforward, train_residual=not res_frozen
                    )
                    seg_loss[i] = loss
                    d_data += g
            except (NonFiniteError, FloatingPointError, RuntimeError) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good) from exc
            if not np.all(np.isfinite(seg_loss[batch])):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss", last_good)
            nb = len(batch)
            d_data /= nb
            model.store.grads /= nb
            if config.spectral_weight > 0 and tape is not None:
                _, pg = spectral_penalty(on_pattern(model.mesh.pattern, data), config.spectral_gamma)
                d_data += config.spectral_weight * pg
            if tape is not None:
                model.net.backward(model.store, tape, d_data)
            if not frozen_all:
                adam_step(model.store.values, model.store.grads, opt, lr, mask)
        train_loss = float(np.mean(seg_loss))
        if not np.isfinite(train_loss):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss", last_good)
        val = validate() if (epoch + 1) % config.validate_every == 0 or epoch == config.epochs - 1 else float("nan")
        if not np.isfinite(val) and (epoch + 1) % config.validate_every == 0:
            raise TrainingDiverged(f"epoch {epoch}: validation diverged", last_good)
        last_good = model.store.copy()
        if np.isfinite(val) and val < best_rne:
            best_rne, best, best_epoch = val, model.store.copy(), epoch
            if checkpoint_path is not None:
                model.save(checkpoint_path, config.seed, {"epoch": epoch, "val_rne": val})
        row = {"epoch": epoch, "train_loss": train_loss, "val_rne": val, "lr": lr, "seconds": time.perf_counter() - t0}
        rows.append(row)
        if progress:
            progress(row)
        log.info("epoch %d loss %.6g val_rne %.6g lr %.3g", epoch, train_loss, val, lr)
        if metrics_path is not None:
            write_metrics(rows, metrics_path)
    model.store.values[:] = best.values
    if checkpoint_path is not None and best_epoch < 0:
        model.save(checkpoint_path, config.seed, {"epoch": -1, "val_rne": best_rne})
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    return TrainResult(best, rows, best_epoch, best_rne, baseline, opt.skipped, run_metadata(config, model))


def run_metadata(config: TrainingConfig, model: HybridModel) -> dict:
    return {
        "training": {**asdict(config), "stride_resolved": config.resolved_stride},
        "adam": dict(ADAM_DEFAULTS),
        "model": model.hyperparameters(),
        "noise_reference": "per-trajectory state standard deviation",
        "validation": "last training trajectory",
    }


def save_run_metadata(meta: dict, path) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
