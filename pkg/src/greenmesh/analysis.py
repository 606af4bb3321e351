"""Error metrics, stability diagnostics and the truncation-error probe."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh
from .neural import power_iteration
from .solver import GreenStepper, Trajectory

DENSE_LIMIT = 1000
EIG_DENSE_LIMIT = 2000


def _states(x) -> np.ndarray:
    return x.states if isinstance(x, Trajectory) else np.asarray(x, dtype=np.float64)


def _pair(pred, truth, skip_initial: bool):
    p, t = _states(pred), _states(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if skip_initial and p.ndim == 2 and p.shape[0] > 1:
        p, t = p[1:], t[1:]
    return p, t


def mse(pred, truth, *, skip_initial: bool = False) -> float:
    """Mean squared nodewise error. ``skip_initial`` drops the shared initial state."""
    p, t = _pair(pred, truth, skip_initial)
    return float(np.mean((p - t) ** 2))


def rne(pred, truth, *, skip_initial: bool = False) -> float:
    """Relative L2 error of the flattened trajectory."""
    p, t = _pair(pred, truth, skip_initial)
    denom = np.linalg.norm(t.ravel())
    if denom == 0.0:
        raise ValueError("reference trajectory has zero norm")
    return float(np.linalg.norm((p - t).ravel()) / denom)


@dataclass
class Estimate:
    value: float
    converged: bool
    iterations: int = 0


def _sym(op) -> sp.csr_matrix:
    a = sp.csr_matrix(op)
    return ((a + a.T) * 0.5).tocsr()


def log_norm(op, *, weights: np.ndarray | None = None, tol: float = 1e-10, return_info: bool = False):
    """mu_2 = largest eigenvalue of the symmetric part.

    With ``weights`` (e.g. control volumes W) the operator is first mapped to
    ``W^{1/2} op W^{-1/2}``, the log norm in the W-weighted inner product.
    """
    a = sp.csr_matrix(op)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"operator must be square, got {a.shape}")
    if weights is not None:
        s = np.sqrt(np.asarray(weights, dtype=np.float64))
        a = (sp.diags(s) @ a @ sp.diags(1.0 / s)).tocsr()
    h = _sym(a)
    n = h.shape[0]
    if n <= DENSE_LIMIT:
        est = Estimate(float(np.linalg.eigvalsh(h.toarray())[-1]), True)
    else:
        try:
            vals = spla.eigsh(h, k=1, which="LA", tol=tol, maxiter=50 * n, return_eigenvectors=False)
            est = Estimate(float(vals[0]), True)
        except spla.ArpackNoConvergence as exc:
            vals = exc.eigenvalues
            est = Estimate(float(vals[0]) if len(vals) else float("nan"), False)
    return est if return_info else est.value


def spectral_norm(op, iters: int = 500, tol: float = 1e-10) -> Estimate:
    """Largest singular value; exact for small operators, power iteration otherwise."""
    a = sp.csr_matrix(op)
    if max(a.shape) <= DENSE_LIMIT:
        if a.nnz == 0:
            return Estimate(0.0, True)
        return Estimate(float(np.linalg.norm(a.toarray(), 2)), True)
    sigma, _, _ = power_iteration(a, iters=iters, tol=tol)
    return Estimate(sigma, True, iters)


def _propagator(stepper: GreenStepper):
    """Linear map of the homogeneous step (zero sources, zero Dirichlet data)."""
    b = stepper.B.tolil(copy=True)
    for i in stepper.dirichlet:
        b.rows[i] = []
        b.data[i] = []
    b = b.tocsr()
    n = stepper.n
    matvec = lambda x: stepper.solve(b @ x)
    rmatvec = lambda y: b.T @ stepper.solve_adjoint(y)
    return spla.LinearOperator((n, n), matvec=matvec, rmatvec=rmatvec, dtype=np.float64), b


def contraction_norm(stepper: GreenStepper, *, tol: float = 1e-8, maxiter: int = 2000, return_info: bool = False):
    """2-norm of the step propagator ``A^{-1} B`` using the cached factors.

    Dirichlet rows propagate prescribed data, not state, so they are zeroed in
    ``B`` before the norm is taken.
    """
    op, _ = _propagator(stepper)
    n = stepper.n
    if n == 1:
        est = Estimate(float(abs(op.matvec(np.ones(1))[0])), True)
    elif n <= 3:
        dense = op.matmat(np.eye(n))
        est = Estimate(float(np.linalg.norm(dense, 2)), True)
    else:
        try:
            s = spla.svds(op, k=1, which="LM", tol=tol, maxiter=maxiter, return_singular_vectors=False,
                          solver="arpack", random_state=0)
            est = Estimate(float(s[0]), True)
        except (spla.ArpackNoConvergence, spla.ArpackError):
            est = _power_norm(op, n, tol, maxiter)
    return est if return_info else est.value


def _power_norm(op, n, tol, maxiter) -> Estimate:
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for it in range(1, maxiter + 1):
        w = op.rmatvec(op.matvec(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return Estimate(0.0, True, it)
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - sigma) <= tol * new:
            return Estimate(new, True, it)
        sigma = new
    return Estimate(sigma, False, maxiter)


def eigen_sample(op, k: int = 64, seed: int = 0) -> np.ndarray:
    """All eigenvalues for small operators; extremal and shift-invert probes otherwise."""
    a = sp.csr_matrix(op)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex)
    if n <= EIG_DENSE_LIMIT:
        return np.sort_complex(sla.eigvals(a.toarray()))
    out = [spla.eigs(a, k=min(k, n - 2), which=w, return_eigenvectors=False) for w in ("LR", "SR", "LM")]
    rng = np.random.default_rng(seed)
    lo = float(np.min(out[1].real))
    for shift in rng.uniform(lo, 0.0, size=4):
        out.append(spla.eigs(a, k=8, sigma=shift, return_eigenvectors=False))
    return np.sort_complex(np.unique(np.concatenate(out)))


@dataclass
class SpectralReport:
    mu2: float
    mu2_weighted: float | None
    sigma_neural: float
    eta: float
    contraction: float
    contraction_converged: bool = True
    eig_physics: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    eig_hybrid: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))

    @property
    def premise_holds(self) -> bool:
        return self.sigma_neural < self.eta

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("eig_")}
        d["premise_holds"] = self.premise_holds
        d["mu2_negative"] = self.mu2 < 0
        d["contractive"] = self.contraction < 1
        return d


def spectral_report(
    l_physics,
    l_neural,
    stepper: GreenStepper | None = None,
    *,
    weights: np.ndarray | None = None,
    eigenvalues: bool = True,
) -> SpectralReport:
    """Collect log norms, sigma(L_neural), the coercivity margin and the contraction norm."""
    l_physics = sp.csr_matrix(l_physics)
    l = (l_physics + sp.csr_matrix(l_neural)).tocsr()
    if stepper is None:
        raise ValueError("a stepper built on the hybrid operator is required")
    c = contraction_norm(stepper, return_info=True)
    return SpectralReport(
        mu2=log_norm(l),
        mu2_weighted=None if weights is None else log_norm(l, weights=weights),
        sigma_neural=spectral_norm(l_neural).value,
        eta=-log_norm(l_physics),
        contraction=c.value,
        contraction_converged=c.converged,
        eig_physics=eigen_sample(l_physics) if eigenvalues else np.zeros(0, dtype=complex),
        eig_hybrid=eigen_sample(l) if eigenvalues else np.zeros(0, dtype=complex),
    )


SPECTRUM_HEADER = ["real", "imag", "operator"]


def export_spectrum(report: SpectralReport, path: str | Path) -> tuple[Path, Path]:
    """Write eigenvalue rows to CSV and the scalar summary to ``<path>.json``."""
    path = Path(path)
    summary = path.with_suffix(".json")
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SPECTRUM_HEADER)
            for name, vals in (("physics", report.eig_physics), ("hybrid", report.eig_hybrid)):
                for z in np.asarray(vals, dtype=complex):
                    w.writerow([repr(float(z.real)), repr(float(z.imag)), name])
        summary.write_text(json.dumps(report.summary(), indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write spectrum export to {path}: {exc}") from exc
    return path, summary


def read_spectrum(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["operator"], []).append(complex(float(row["real"]), float(row["imag"])))
    return {k: np.asarray(v) for k, v in out.items()}


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form field with gradient and Laplacian, for consistency checks."""

    name: str
    u: Callable
    grad: Callable
    lap: Callable

    def values(self, nodes: np.ndarray) -> np.ndarray:
        return self.u(nodes[:, 0], nodes[:, 1])

    def operator_values(self, nodes, diffusivity=1.0, velocity=None, decay=0.0) -> np.ndarray:
        """Pointwise ``kappa*Lap(u) - c.grad(u) - decay*u``."""
        x, y = nodes[:, 0], nodes[:, 1]
        out = diffusivity * np.broadcast_to(self.lap(x, y), x.shape).astype(np.float64)
        if velocity is not None:
            gx, gy = self.grad(x, y)
            out = out - velocity[0] * gx - velocity[1] * gy
        if decay:
            out = out - decay * self.u(x, y)
        return out


def quadratic_field(a=0.0, b=0.0, c=0.0, d=0.0, e=0.0, g=0.0, name="quadratic") -> AnalyticField:
    """``a x^2 + b x y + c y^2 + d x + e y + g``."""
    return AnalyticField(
        name,
        u=lambda x, y: a * x * x + b * x * y + c * y * y + d * x + e * y + g,
        grad=lambda x, y: (2 * a * x + b * y + d, b * x + 2 * c * y + e),
        lap=lambda x, y: np.full_like(np.asarray(x, dtype=np.float64), 2 * a + 2 * c),
    )


FIELDS: dict[str, AnalyticField] = {
    "linear": quadratic_field(d=2.0, e=-3.0, g=1.0, name="linear"),
    "quadratic": quadratic_field(a=1.0, c=1.0, name="quadratic"),
    "saddle": quadratic_field(a=1.0, c=-1.0, name="saddle"),
    "xy": quadratic_field(b=1.0, name="xy"),
    "trig": AnalyticField(
        "trig",
        u=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
        grad=lambda x, y: (np.pi * np.cos(np.pi * x) * np.sin(np.pi * y), np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)),
        lap=lambda x, y: -2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y),
    ),
}


@dataclass
class TruncationProbe:
    field: str
    projected: np.ndarray
    exact: np.ndarray
    tau_physics: np.ndarray
    tau_hybrid: np.ndarray
    interior: np.ndarray

    @property
    def norm_physics(self) -> float:
        return float(np.linalg.norm(self.tau_physics[self.interior]))

    @property
    def norm_hybrid(self) -> float:
        return float(np.linalg.norm(self.tau_hybrid[self.interior]))

    @property
    def inf_physics(self) -> float:
        return float(np.max(np.abs(self.tau_physics[self.interior]), initial=0.0))

    @property
    def inf_hybrid(self) -> float:
        return float(np.max(np.abs(self.tau_hybrid[self.interior]), initial=0.0))

    def summary(self) -> dict:
        return {
            "field": self.field,
            "norm_physics": self.norm_physics,
            "norm_hybrid": self.norm_hybrid,
            "inf_physics": self.inf_physics,
            "inf_hybrid": self.inf_hybrid,
            "n_interior": int(np.count_nonzero(self.interior)),
        }


def truncation_probe(l_physics, l_neural, mesh: Mesh, field: AnalyticField | str, *, diffusivity=1.0, velocity=None, decay=0.0) -> TruncationProbe:
    """Defect ``L P_h u - P_h(Lu)`` for the physics and hybrid operators, on interior nodes."""
    if isinstance(field, str):
        field = FIELDS[field]
    pu = field.values(mesh.nodes)
    exact = field.operator_values(mesh.nodes, diffusivity, velocity, decay)
    lp = sp.csr_matrix(l_physics)
    tau_p = lp @ pu - exact
    tau_h = tau_p + (sp.csr_matrix(l_neural) @ pu if l_neural is not None else 0.0)
    return TruncationProbe(field.name, pu, exact, tau_p, tau_h, mesh.interior.copy())
