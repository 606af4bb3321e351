"""Physics-prior operator assembly and sparse helpers.

Every operator produced here lives on the mesh pattern (adjacency plus
diagonal) as a canonical ``scipy.sparse.csr_matrix`` with sorted column
indices, so operators built on the same mesh share one data layout and can
be combined or differentiated entry-by-entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import EdgeGeometry, Mesh, Pattern

SparseOperator = sp.csr_matrix


def on_pattern(pattern: Pattern, data: np.ndarray) -> sp.csr_matrix:
    data = np.asarray(data, dtype=np.float64)
    if data.shape != (pattern.nnz,):
        raise ValueError(f"data length {data.shape} does not match pattern nnz {pattern.nnz}")
    n = pattern.n
    op = sp.csr_matrix((data.copy(), pattern.indices.copy(), pattern.indptr.copy()), shape=(n, n))
    op.has_sorted_indices = True
    return op


def pattern_data(op: sp.spmatrix, pattern: Pattern) -> np.ndarray:
    """Values of ``op`` at every pattern position; raises if ``op`` has entries outside it."""
    op = sp.csr_matrix(op)
    op.sum_duplicates()
    n = pattern.n
    if op.shape != (n, n):
        raise ValueError(f"shape {op.shape} does not match pattern ({n}, {n})")
    rows = np.repeat(np.arange(n), np.diff(op.indptr))
    key_op = rows * n + op.indices
    key_pat = pattern.rows * n + pattern.indices
    pos = np.searchsorted(key_pat, key_op)
    pos = np.clip(pos, 0, len(key_pat) - 1)
    outside = key_pat[pos] != key_op
    if np.any(outside & (op.data != 0)):
        raise ValueError("operator has nonzeros outside the mesh pattern")
    out = np.zeros(pattern.nnz)
    np.add.at(out, pos[~outside], op.data[~outside])
    return out


def _row_assembled(mesh: Mesh, edge_values: np.ndarray, row_scale: np.ndarray) -> sp.csr_matrix:
    pat = mesh.pattern
    data = np.zeros(pat.nnz)
    data[pat.edge_pos] = edge_values
    diag = np.zeros(mesh.n_nodes)
    np.add.at(diag, mesh.edges[:, 0], -edge_values)
    data[pat.diag_pos] = diag
    data *= row_scale[pat.rows]
    return on_pattern(pat, data)


def assemble_laplacian(mesh: Mesh, geometry: EdgeGeometry) -> sp.csr_matrix:
    """Cotangent Laplacian, rows scaled by the mixed Voronoi area."""
    return _row_assembled(mesh, geometry.weight, 1.0 / mesh.control_volume)


def assemble_gradient(mesh: Mesh, geometry: EdgeGeometry, component) -> sp.csr_matrix:
    """Green-Gauss gradient component on the median-dual control volumes.

    Face values are the arithmetic mean of the two node values; with closed
    control volumes the diagonal ``-sum`` form is the same sum written on
    differences, which makes interior rows exact on linear fields.
    """
    axis = {"x": 0, "y": 1, 0: 0, 1: 1}.get(component)
    if axis is None:
        raise ValueError(f"component must be 'x' or 'y', got {component!r}")
    vals = geometry.projection(axis) * geometry.face_length * 0.5
    return _row_assembled(mesh, vals, 1.0 / mesh.dual_volume)


def identity(mesh: Mesh) -> sp.csr_matrix:
    pat = mesh.pattern
    data = np.zeros(pat.nnz)
    data[pat.diag_pos] = 1.0
    return on_pattern(pat, data)


def zeros(mesh: Mesh) -> sp.csr_matrix:
    return on_pattern(mesh.pattern, np.zeros(mesh.pattern.nnz))


@dataclass(frozen=True)
class OperatorBundle:
    """Linear spatial operator ``kappa*Lap - c.Grad - decay*I`` for one scenario."""

    diffusivity: float
    velocity: tuple[float, float] | None = None
    decay: float = 0.0

    def compose(self, mesh: Mesh, geometry: EdgeGeometry) -> sp.csr_matrix:
        pat = mesh.pattern
        data = self.diffusivity * assemble_laplacian(mesh, geometry).data
        if self.velocity is not None:
            cx, cy = self.velocity
            data = data - cx * assemble_gradient(mesh, geometry, 0).data
            data = data - cy * assemble_gradient(mesh, geometry, 1).data
        if self.decay:
            data = data.copy()
            data[pat.diag_pos] -= self.decay
        return on_pattern(pat, data)


def compose_hybrid(l_physics: sp.spmatrix, l_neural: sp.spmatrix) -> sp.csr_matrix:
    """Entrywise sum on the union pattern."""
    if l_physics.shape != l_neural.shape:
        raise ValueError(f"shape mismatch: {l_physics.shape} vs {l_neural.shape}")
    a = sp.csr_matrix(l_physics)
    b = sp.csr_matrix(l_neural)
    if (
        a.nnz == b.nnz
        and np.array_equal(a.indptr, b.indptr)
        and np.array_equal(a.indices, b.indices)
    ):
        out = sp.csr_matrix((a.data + b.data, a.indices.copy(), a.indptr.copy()), shape=a.shape)
    else:
        out = (a + b).tocsr()
    out.sort_indices()
    return out


def spmv(op: sp.spmatrix, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != op.shape[1]:
        raise ValueError(f"vector length {v.shape} does not match operator {op.shape}")
    return op @ v


def export_triplets(op: sp.spmatrix, path: str | Path, provenance: dict | None = None) -> Path:
    """Write ``row col value`` lines plus a ``.json`` sidecar (shape, nnz, provenance)."""
    path = Path(path)
    coo = sp.coo_matrix(op)
    order = np.lexsort((coo.col, coo.row))
    with path.open("w", encoding="utf-8") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps({"shape": list(op.shape), "nnz": int(coo.nnz), "provenance": provenance or {}}, sort_keys=True, indent=2),
        encoding="utf-8",
    )
    return path


def read_triplets(path: str | Path) -> sp.csr_matrix:
    path = Path(path)
    info = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    rows, cols, vals = [], [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        r, c, v = line.split()
        rows.append(int(r))
        cols.append(int(c))
        vals.append(float(v))
    return sp.csr_matrix((vals, (rows, cols)), shape=tuple(info["shape"]))
