"""Crank-Nicolson discrete Green propagation with cached sparse LU factors.

One step solves ``(I - dt/2 L) u1 = (I + dt/2 L) u0 + dt/2 (f0 + f1)``; the
factorization of the left-hand matrix is computed once per (L, dt) and reused
for every forward and transpose solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import container
from .mesh import Mesh

log = logging.getLogger(__name__)


class FactorizationError(RuntimeError):
    """The system matrix could not be factorized."""


class NonFiniteError(FloatingPointError):
    """A state or source contained NaN/inf."""


@dataclass(frozen=True)
class BoundarySpec:
    """Dirichlet node set and their prescribed values.

    ``values`` is either a callable ``t -> array`` or a constant array; when
    omitted the Dirichlet data is zero. Neumann flux enters through the source
    (see :func:`neumann_source`), so it has no field here.
    """

    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: Callable[[float], np.ndarray] | np.ndarray | None = None

    @classmethod
    def from_mesh(cls, mesh: Mesh, values=None) -> "BoundarySpec":
        return cls(dirichlet=mesh.dirichlet_nodes, values=values)

    def at(self, t: float) -> np.ndarray:
        if self.values is None:
            return np.zeros(len(self.dirichlet))
        if callable(self.values):
            return np.asarray(self.values(t), dtype=np.float64)
        return np.asarray(self.values, dtype=np.float64)


@dataclass
class Trajectory:
    """States ``u^k`` and sources ``f^k`` on a fixed mesh, step-major."""

    states: np.ndarray
    sources: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.sources = np.asarray(self.sources, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise ValueError("a trajectory needs at least two states")
        if self.sources.shape != self.states.shape:
            raise ValueError(f"sources {self.sources.shape} and states {self.states.shape} differ")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.sources))):
            raise NonFiniteError("trajectory contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.states.shape[1]


def save_trajectory(traj: Trajectory, path: str | Path) -> str:
    meta = dict(traj.meta)
    meta.update(kind="trajectory", n_nodes=traj.n_nodes, steps=traj.n_steps, dt=traj.dt)
    meta.setdefault("units", "dimensionless")
    meta.setdefault("scenario", "unspecified")
    return container.write(path, meta, {"states": traj.states, "sources": traj.sources})


def load_trajectory(path: str | Path) -> Trajectory:
    meta, arr = container.read(path)
    if meta.get("kind") != "trajectory":
        raise container.ContainerError(f"{path} does not hold a trajectory")
    dt = meta["dt"]
    extra = {k: v for k, v in meta.items() if k not in ("kind", "n_nodes", "steps", "dt")}
    return Trajectory(states=arr["states"], sources=arr["sources"], dt=dt, meta=extra)


def neumann_source(mesh: Mesh, flux: np.ndarray, diffusivity: float = 1.0) -> np.ndarray:
    """Source vector for a prescribed outward normal derivative on boundary nodes.

    Each boundary node receives ``kappa * h * l_face / |Omega_i|`` where
    ``l_face`` is half the length of its incident boundary edges.
    """
    flux = np.asarray(flux, dtype=np.float64)
    bmask = mesh.boundary_edge_mask
    e = mesh.edges[bmask]
    e = e[e[:, 0] < e[:, 1]]
    length = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    face = np.zeros(mesh.n_nodes)
    np.add.at(face, e[:, 0], 0.5 * length)
    np.add.at(face, e[:, 1], 0.5 * length)
    return diffusivity * flux * face / mesh.control_volume


def _check_finite(name: str, v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains non-finite values")


class GreenStepper:
    """Cached Crank-Nicolson propagator for a fixed operator and time step.

    Dirichlet rows of both ``A`` and ``B`` are replaced by identity rows and
    the right-hand side there is set to the boundary value at ``t^{k+1}``.
    The instance is immutable after construction; build a new one when the
    operator or ``dt`` changes.
    """

    def __init__(self, l: sp.spmatrix, dt: float, bc: BoundarySpec | None = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if l.shape[0] != l.shape[1]:
            raise ValueError(f"operator must be square, got {l.shape}")
        l = sp.csr_matrix(l)
        _check_finite("operator", l.data)
        self.dt = float(dt)
        self.bc = bc or BoundarySpec()
        self.n = l.shape[0]
        self.L = l
        eye = sp.identity(self.n, format="csr")
        a = (eye - 0.5 * self.dt * l).tocsr()
        b = (eye + 0.5 * self.dt * l).tocsr()
        d = np.asarray(self.bc.dirichlet, dtype=np.int64)
        self.dirichlet = d
        self.free = np.ones(self.n, dtype=bool)
        self.free[d] = False
        if len(d):
            keep = sp.diags(self.free.astype(np.float64))
            pin = sp.diags((~self.free).astype(np.float64))
            a = (keep @ a + pin).tocsr()
            b = (keep @ b + pin).tocsr()
        a.sort_indices()
        b.sort_indices()
        self.A = a
        self.B = b
        self._lu = self._factorize(a)

    @staticmethod
    def _factorize(a: sp.csr_matrix):
        try:
            return splu(a.tocsc(), permc_spec="COLAMD", diag_pivot_thresh=0.1)
        except RuntimeError as exc:
            diag = a.diagonal()
            small = np.argsort(np.abs(diag))[:5]
            raise FactorizationError(
                f"LU factorization failed ({exc}); smallest |A_ii| at rows "
                f"{small.tolist()} = {np.abs(diag[small]).tolist()} - dt may be too large "
                "for an unstable operator or boundary rows are inconsistent"
            ) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=np.float64))

    def solve_adjoint(self, g_u: np.ndarray) -> np.ndarray:
        """Solve ``A^T g_b = g_u`` with the cached factors."""
        return self._lu.solve(np.asarray(g_u, dtype=np.float64), trans="T")

    def rhs(self, u_k, f_k, f_k1, g_next=None) -> np.ndarray:
        b = self.B @ u_k + (0.5 * self.dt) * (f_k + f_k1)
        if len(self.dirichlet):
            b[self.dirichlet] = self.bc.at(0.0) if g_next is None else g_next
        return b

    def _checked(self, u_k, f_k, f_k1):
        out = []
        for name, v in (("u_k", u_k), ("f_k", f_k), ("f_k1", f_k1)):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.n,):
                raise ValueError(f"{name} has shape {v.shape}, expected ({self.n},)")
            _check_finite(name, v)
            out.append(v)
        return out

    def step(self, u_k, f_k, f_k1, g_next=None, t_next: float | None = None) -> np.ndarray:
        """Advance one step. ``g_next`` (or ``bc.at(t_next)``) gives Dirichlet data at t^{k+1}."""
        u_k, f_k, f_k1 = self._checked(u_k, f_k, f_k1)
        if g_next is None and t_next is not None and len(self.dirichlet):
            g_next = self.bc.at(t_next)
        return self._lu.solve(self.rhs(u_k, f_k, f_k1, g_next))

    def rollout(
        self,
        u0,
        sources,
        steps: int,
        *,
        t0: float = 0.0,
        boundary: np.ndarray | None = None,
        refactorize_each_step: bool = False,
        meta: dict | None = None,
    ) -> Trajectory:
        """Roll ``steps`` steps from ``u0``.

        ``sources`` holds ``f^0 .. f^steps``; ``boundary`` optionally holds the
        Dirichlet values per step (shape ``(steps+1, n_dirichlet)``), otherwise
        ``bc.at(t)`` is used. ``refactorize_each_step`` recomputes the LU
        factors before every solve (reference path for the cached strategy).
        """
        if steps < 1:
            raise ValueError("steps must be >= 1")
        sources = np.asarray(sources, dtype=np.float64)
        if sources.shape[0] < steps + 1:
            raise ValueError(f"need {steps + 1} source vectors, got {sources.shape[0]}")
        states = np.empty((steps + 1, self.n))
        u = np.array(u0, dtype=np.float64)
        if len(self.dirichlet):
            u[self.dirichlet] = boundary[0] if boundary is not None else self.bc.at(t0)
        states[0] = u
        for k in range(steps):
            g = None
            if len(self.dirichlet):
                g = boundary[k + 1] if boundary is not None else self.bc.at(t0 + (k + 1) * self.dt)
            try:
                u, f0, f1 = self._checked(u, sources[k], sources[k + 1])
                lu = self._factorize(self.A) if refactorize_each_step else self._lu
                u = lu.solve(self.rhs(u, f0, f1, g))
            except (NonFiniteError, ValueError, FactorizationError) as exc:
                raise type(exc)(f"step {k}: {exc}") from exc
            states[k + 1] = u
        return Trajectory(states=states, sources=sources[: steps + 1].copy(), dt=self.dt, meta=dict(meta or {}))


def build_stepper(l: sp.spmatrix, dt: float, bc: BoundarySpec | None = None) -> GreenStepper:
    return GreenStepper(l, dt, bc)


def step(stepper: GreenStepper, u_k, f_k, f_k1, **kw) -> np.ndarray:
    return stepper.step(u_k, f_k, f_k1, **kw)


def rollout(stepper: GreenStepper, u0, sources, steps: int, **kw) -> Trajectory:
    return stepper.rollout(u0, sources, steps, **kw)


def solve_adjoint(stepper: GreenStepper, g_u) -> np.ndarray:
    return stepper.solve_adjoint(g_u)
