"""Synthetic laser-heating trajectories on a plate.

States are nondimensional temperature rises ``(T - T_amb) / dT_scale`` on a
unit-square mesh of physical side ``domain_size``; time stays in seconds.
Convective loss ``-h_conv (T - T_amb)`` through a plate of thickness
``thickness`` becomes a decay term ``-h_conv / (rho c_p thickness) * u``; its
constant part cancels in the shifted state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import container
from .mesh import Mesh, build_perturbed_grid, compute_edge_geometry, load_mesh, save_mesh
from .operators import OperatorBundle
from .solver import BoundarySpec, GreenStepper, NonFiniteError, Trajectory, load_trajectory, save_trajectory

SEEN_KINDS = ("orbit", "linescan")
UNSEEN_KINDS = ("spline", "lissajous")
PATH_KINDS = SEEN_KINDS + UNSEEN_KINDS


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "laser-desk"
    # material and environment (SI)
    rho: float = 7850.0
    cp: float = 450.0
    conductivity: float = 50.0
    h_conv: float = 25.0
    t_amb: float = 298.15
    thickness: float = 1e-3
    domain_size: float = 0.03
    dt_scale: float = 100.0
    # mesh
    nx: int = 24
    ny: int = 24
    jitter: float = 0.3
    mesh_seed: int = 0
    # time
    dt: float = 0.5
    steps: int = 120
    ref_substeps: int = 32
    # sources
    n_beams: int = 2
    power: tuple[float, float] = (2.0, 4.0)
    sigma_mm: tuple[float, float] = (1.0, 2.0)
    speed: tuple[float, float] = (0.05, 0.15)
    ramp: float = 2.0
    margin: float = 0.2
    velocity: tuple[float, float] | None = None
    extra_decay: float = 0.0

    def __post_init__(self):
        problems = []
        if self.diffusivity <= 0:
            problems.append("diffusivity must be positive (check rho, cp, conductivity, domain_size)")
        if self.dt <= 0:
            problems.append("dt must be positive")
        if self.steps < 2:
            problems.append("steps must be >= 2")
        if self.ref_substeps < 1:
            problems.append("ref_substeps must be >= 1")
        if self.n_beams < 0:
            problems.append("n_beams must be >= 0")
        if not (0 < self.sigma_mm[0] <= self.sigma_mm[1]):
            problems.append("sigma_mm must satisfy 0 < lo <= hi")
        if not (0 < self.margin < 0.5):
            problems.append("margin must lie in (0, 0.5)")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def diffusivity(self) -> float:
        """Nondimensional diffusivity ``k / (rho c_p D^2)`` in 1/s."""
        return self.conductivity / (self.rho * self.cp * self.domain_size**2)

    @property
    def decay(self) -> float:
        return self.h_conv / (self.rho * self.cp * self.thickness) + self.extra_decay

    @property
    def power_scale(self) -> float:
        """Converts beam power in W to nondimensional source integral per second."""
        return 1.0 / (self.rho * self.cp * self.thickness * self.domain_size**2 * self.dt_scale)

    def bundle(self) -> OperatorBundle:
        """Full linear operator used to generate reference data."""
        return OperatorBundle(self.diffusivity, self.velocity, self.decay)

    def prior(self, kind: str = "geometric") -> OperatorBundle:
        """Physics prior for the hybrid model.

        ``geometric`` keeps only the Laplacian and gradient terms, leaving the
        convective loss to the learned components; ``full`` is :meth:`bundle`.
        """
        if kind == "geometric":
            return OperatorBundle(self.diffusivity, self.velocity, 0.0)
        if kind == "full":
            return self.bundle()
        raise ValueError(f"unknown prior {kind!r}; expected 'geometric' or 'full'")

    def build_mesh(self) -> Mesh:
        return build_perturbed_grid(self.nx, self.ny, self.jitter, self.mesh_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(diffusivity=self.diffusivity, decay=self.decay, power_scale=self.power_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known - {"diffusivity", "decay", "power_scale"})
        if unknown:
            raise ValueError(f"unknown scenario fields: {', '.join(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known}
        return cls(**kw)


PRESETS = {
    "laser-desk": ScenarioSpec(),
    "laser-paper": ScenarioSpec(name="laser-paper", n_beams=10),
}


def _tri(s):
    """Triangle wave in [0, 1] with period 1."""
    s = np.mod(s, 1.0)
    return 1.0 - np.abs(2.0 * s - 1.0)


@dataclass(frozen=True)
class SourcePath:
    """One Gaussian beam moving along a parametric path in the unit square."""

    kind: str
    params: dict
    sigma: float
    power: float
    ramp: float = 2.0

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        p = self.params
        if self.kind == "orbit":
            a = p["omega"] * t + p["phase"]
            x, y = p["cx"] + p["r"] * np.cos(a), p["cy"] + p["r"] * np.sin(a)
        elif self.kind == "linescan":
            x = p["lo"] + (p["hi"] - p["lo"]) * _tri(p["fx"] * t + p["px"])
            y = p["lo"] + (p["hi"] - p["lo"]) * _tri(p["fy"] * t + p["py"])
        elif self.kind == "lissajous":
            x = 0.5 + p["ax"] * np.sin(p["wx"] * t + p["phase"])
            y = 0.5 + p["ay"] * np.sin(p["wy"] * t)
        else:
            s = np.mod(p["rate"] * t + p["s0"], 1.0)
            cs = _spline(p["ctrl"])
            x, y = cs(s).T
        return np.stack([x, y], axis=-1)

    def amplitude(self, t: float) -> float:
        if self.ramp <= 0:
            return self.power
        s = min(max(t / self.ramp, 0.0), 1.0)
        return self.power * s * s * (3.0 - 2.0 * s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SourcePath":
        return cls(**d)


def _spline(ctrl) -> CubicSpline:
    c = np.asarray(ctrl, dtype=np.float64)
    c = np.vstack([c, c[:1]])
    return CubicSpline(np.linspace(0.0, 1.0, len(c)), c, bc_type="periodic")


def validate_path(path: SourcePath, horizon: float, margin: float = 0.0, samples: int = 4001) -> None:
    pos = path.position(np.linspace(0.0, horizon, samples))
    if np.any(pos < margin - 1e-12) or np.any(pos > 1.0 - margin + 1e-12):
        raise ValueError(f"{path.kind} path leaves the domain interior")


def sample_path(kind: str, spec: ScenarioSpec, rng: np.random.Generator) -> SourcePath:
    """Draw a random beam of the given path family that stays within ``spec.margin``."""
    m = spec.margin
    horizon = spec.dt * (spec.steps - 1)
    sigma = rng.uniform(*spec.sigma_mm) * 1e-3 / spec.domain_size
    power = rng.uniform(*spec.power) * spec.power_scale
    speed = rng.uniform(*spec.speed)
    for _ in range(100):
        if kind == "orbit":
            r = rng.uniform(0.08, 0.5 - m)
            cx, cy = rng.uniform(m + r, 1 - m - r, size=2)
            params = {"cx": cx, "cy": cy, "r": r, "omega": rng.choice([-1.0, 1.0]) * speed / r, "phase": rng.uniform(0, 2 * np.pi)}
        elif kind == "linescan":
            span = 1.0 - 2 * m
            fx = speed / (2 * span)
            params = {"lo": m, "hi": 1 - m, "fx": fx, "fy": fx * rng.uniform(0.05, 0.2), "px": rng.uniform(), "py": rng.uniform()}
        elif kind == "lissajous":
            ax, ay = rng.uniform(0.5 * (0.5 - m), 0.5 - m, size=2)
            nx_, ny_ = [(3, 2), (2, 3), (5, 4), (4, 3)][rng.integers(4)]
            base = speed / (np.hypot(ax * nx_, ay * ny_) * 2 / np.pi)
            params = {"ax": ax, "ay": ay, "wx": base * nx_, "wy": base * ny_, "phase": rng.uniform(0, 2 * np.pi)}
        else:
            ctrl = rng.uniform(m + 0.1, 1 - m - 0.1, size=(6, 2))
            cs = _spline(ctrl)
            s = np.linspace(0, 1, 2001)
            length = float(np.sum(np.linalg.norm(np.diff(cs(s), axis=0), axis=1)))
            params = {"ctrl": ctrl.tolist(), "rate": speed / length, "s0": rng.uniform()}
        params = {k: (float(v) if np.isscalar(v) else v) for k, v in params.items()}
        path = SourcePath(kind, params, float(sigma), float(power), spec.ramp)
        try:
            validate_path(path, horizon, m)
            return path
        except ValueError:
            continue
    raise ValueError(f"could not place a {kind} path inside the domain")


def evaluate_source(paths: list[SourcePath], mesh: Mesh, t: float) -> np.ndarray:
    """Sum of normalized Gaussian spots: ``P(t) exp(-r^2 / 2 sigma^2) / (2 pi sigma^2)``."""
    f = np.zeros(mesh.n_nodes)
    for p in paths:
        c = p.position(t)
        r2 = np.sum((mesh.nodes - c) ** 2, axis=1)
        f += p.amplitude(t) * np.exp(-r2 / (2 * p.sigma**2)) / (2 * np.pi * p.sigma**2)
    return f


def generate_reference(spec: ScenarioSpec, paths: list[SourcePath], mesh: Mesh, u0=None, *, substeps: int | None = None) -> Trajectory:
    """Fine-step Crank-Nicolson solution with the same spatial operator, sampled every ``dt``."""
    geom = compute_edge_geometry(mesh)
    l = spec.bundle().compose(mesh, geom)
    sub = spec.ref_substeps if substeps is None else substeps
    h = spec.dt / sub
    st = GreenStepper(l, h, BoundarySpec.from_mesh(mesh))
    n = mesh.n_nodes
    states = np.empty((spec.steps, n))
    sources = np.empty((spec.steps, n))
    u = np.zeros(n) if u0 is None else np.array(u0, dtype=np.float64)
    states[0] = u
    sources[0] = evaluate_source(paths, mesh, 0.0)
    f_prev = sources[0]
    for k in range(1, spec.steps):
        for j in range(1, sub + 1):
            t = k * spec.dt if j == sub else (k - 1) * spec.dt + j * h
            f_next = evaluate_source(paths, mesh, t)
            try:
                u = st.step(u, f_prev, f_next)
            except NonFiniteError as exc:
                raise NonFiniteError(f"reference diverged at step {k}, substep {j}: {exc}") from exc
            f_prev = f_next
        states[k] = u
        sources[k] = f_prev
    meta = {
        "scenario": spec.name,
        "units": f"(T - {spec.t_amb} K) / {spec.dt_scale} K; time in s",
        "paths": [p.to_dict() for p in paths],
        "ref_substeps": sub,
    }
    return Trajectory(states, sources, spec.dt, meta)


@dataclass
class Dataset:
    spec: ScenarioSpec
    mesh: Mesh
    trajectories: list[Trajectory]
    splits: list[str]
    seed: int = 0
    files: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[Trajectory]:
        return [t for t, s in zip(self.trajectories, self.splits) if s == name]

    @property
    def train(self) -> list[Trajectory]:
        """Training trajectories including the validation hold-out (last)."""
        return self.split("train") + self.split("val")


def generate_dataset(spec: ScenarioSpec, n_train: int, n_test_seen: int, n_test_unseen: int, seed: int) -> Dataset:
    """Train and seen-test trajectories use orbit/linescan beams; unseen uses spline/lissajous.

    The last training trajectory is labelled ``val``.
    """
    if min(n_train, n_test_seen, n_test_unseen) < 1:
        raise ValueError("all split counts must be >= 1")
    mesh = spec.build_mesh()
    labels = ["train"] * (n_train - 1) + ["val"] + ["test_seen"] * n_test_seen + ["test_unseen"] * n_test_unseen
    children = np.random.SeedSequence(seed).spawn(len(labels))
    trajs = []
    for label, ss in zip(labels, children):
        rng = np.random.default_rng(ss)
        kinds = UNSEEN_KINDS if label == "test_unseen" else SEEN_KINDS
        paths = [sample_path(kinds[rng.integers(len(kinds))], spec, rng) for _ in range(spec.n_beams)]
        tr = generate_reference(spec, paths, mesh)
        tr.meta.update(split=label, path_kinds=sorted({p.kind for p in paths}))
        trajs.append(tr)
    return Dataset(spec, mesh, trajs, labels, seed)


def save_dataset(ds: Dataset, directory: str | Path) -> dict:
    """Write ``mesh.dgm``, ``traj_###.dgm`` and ``manifest.json``; return the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    checksums = {"mesh.dgm": save_mesh(ds.mesh, d / "mesh.dgm")}
    files = []
    for i, tr in enumerate(ds.trajectories):
        name = f"traj_{i:03d}.dgm"
        checksums[name] = save_trajectory(tr, d / name)
        files.append(name)
    ds.files = files
    manifest = {
        "format": "DGM1",
        "scenario": ds.spec.to_dict(),
        "seed": ds.seed,
        "mesh_checksum": ds.mesh.checksum(),
        "normalization": {"state": "(T - t_amb) / dt_scale", "t_amb": ds.spec.t_amb, "dt_scale": ds.spec.dt_scale},
        "splits": {s: [f for f, l in zip(files, ds.splits) if l == s] for s in ("train", "val", "test_seen", "test_unseen")},
        "path_kinds": {"seen": list(SEEN_KINDS), "unseen": list(UNSEEN_KINDS)},
        "checksums": checksums,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_dataset(directory: str | Path, verify: bool = True) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if verify:
        for name, digest in manifest["checksums"].items():
            if container.sha256_file(d / name) != digest:
                raise container.ContainerError(f"checksum mismatch for {d / name}")
    spec = ScenarioSpec.from_dict(manifest["scenario"])
    mesh = load_mesh(d / "mesh.dgm")
    order = sorted(f for fs in manifest["splits"].values() for f in fs)
    label = {f: s for s, fs in manifest["splits"].items() for f in fs}
    trajs = [load_trajectory(d / f) for f in order]
    return Dataset(spec, mesh, trajs, [label[f] for f in order], manifest["seed"], order)


def dataset_digest(directory: str | Path) -> str:
    """Hash over the manifest checksums; equal for byte-identical datasets."""
    manifest = json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))
    return hashlib.sha256(json.dumps(manifest["checksums"], sort_keys=True).encode()).hexdigest()


def quadratic_family(
    mesh: Mesh, n: int, *, diffusivity: float = 1.0, dt: float = 0.01, steps: int = 10, seed: int = 0, linear: bool = True
):
    """Exact heat-equation trajectories ``u = p(x) + kappa t Lap(p)`` for random quadratics ``p``.

    Sources are zero. Returns ``(trajectories, coefficients)`` with rows
    ``(a, b, c, d, e, g)`` of ``a x^2 + b x y + c y^2 + d x + e y + g``.
    ``linear=False`` draws homogeneous quadratic forms plus a constant (d = e = 0).
    """
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((n, 6))
    if not linear:
        coeffs[:, 3:5] = 0.0
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    t = dt * np.arange(steps)[:, None]
    trajs = []
    for a, b, c, d, e, g in coeffs:
        p = a * x * x + b * x * y + c * y * y + d * x + e * y + g
        states = p[None, :] + diffusivity * t * (2 * a + 2 * c)
        trajs.append(Trajectory(states, np.zeros_like(states), dt, {"scenario": "quadratic-heat"}))
    return trajs, coeffs
