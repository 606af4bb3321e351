"""Triangulated meshes, node control volumes and per-edge geometry."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError

from . import container


class MeshError(ValueError):
    """Raised when a point set or triangulation cannot be used."""


class NodeType(enum.IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Mesh:
    """Node-centred triangulation of a planar domain.

    ``edges`` holds every directed edge ``(i, j)`` with ``i != j``, both
    directions present, sorted lexicographically. Two node areas are kept:
    ``control_volume`` is the mixed Voronoi area used by the Laplacian, and
    ``dual_volume`` is the median-dual (barycentric) area used by the
    Green-Gauss gradient.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    node_type: np.ndarray
    control_volume: np.ndarray
    dual_volume: np.ndarray
    units: str = "dimensionless"

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, np.float64))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(self, "edges", _frozen(self.edges, np.int64))
        object.__setattr__(self, "node_type", _frozen(self.node_type, np.int8))
        object.__setattr__(self, "control_volume", _frozen(self.control_volume, np.float64))
        object.__setattr__(self, "dual_volume", _frozen(self.dual_volume, np.float64))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def boundary(self) -> np.ndarray:
        return self.node_type != NodeType.INTERIOR

    @property
    def interior(self) -> np.ndarray:
        return self.node_type == NodeType.INTERIOR

    @property
    def dirichlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_type == NodeType.DIRICHLET)

    def neighbors(self, i: int) -> np.ndarray:
        lo, hi = self.pattern.indptr[i], self.pattern.indptr[i + 1]
        cols = self.pattern.indices[lo:hi]
        return cols[cols != i]

    @cached_property
    def pattern(self) -> "Pattern":
        return Pattern.from_edges(self.n_nodes, self.edges)

    @cached_property
    def boundary_edge_mask(self) -> np.ndarray:
        """True for directed edges that bound exactly one triangle."""
        count = _undirected_triangle_count(self.triangles, self.n_nodes)
        key = np.minimum(self.edges[:, 0], self.edges[:, 1]) * self.n_nodes + np.maximum(
            self.edges[:, 0], self.edges[:, 1]
        )
        return np.array([count[k] == 1 for k in key.tolist()], dtype=bool)

    def area(self) -> float:
        p = self.nodes[self.triangles]
        return float(np.sum(0.5 * np.abs(_cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))))

    def with_node_types(self, node_type: np.ndarray) -> "Mesh":
        node_type = np.asarray(node_type, dtype=np.int8)
        if node_type.shape != (self.n_nodes,):
            raise MeshError("node_type has wrong length")
        bnd = _boundary_nodes(self.triangles, self.n_nodes)
        if np.any((node_type == NodeType.INTERIOR) & bnd) or np.any(
            (node_type != NodeType.INTERIOR) & ~bnd
        ):
            raise MeshError("boundary tags must be assigned to exactly the hull nodes")
        return replace(self, node_type=node_type)

    def with_dirichlet(self, mask: np.ndarray) -> "Mesh":
        """Tag boundary nodes in ``mask`` Dirichlet and the remaining boundary nodes Neumann."""
        mask = np.asarray(mask, dtype=bool)
        bnd = self.boundary
        if np.any(mask & ~bnd):
            raise MeshError("Dirichlet mask selects interior nodes")
        nt = np.where(bnd, NodeType.NEUMANN, NodeType.INTERIOR).astype(np.int8)
        nt[mask] = NodeType.DIRICHLET
        return replace(self, node_type=nt)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(container.to_bytes(*self._payload())).hexdigest()

    def _payload(self):
        meta = {
            "kind": "mesh",
            "n_nodes": self.n_nodes,
            "n_triangles": int(len(self.triangles)),
            "n_edges": self.n_edges,
            "units": self.units,
            "boundary_tags": {t.name.lower(): int(np.sum(self.node_type == t)) for t in NodeType},
        }
        arrays = {
            "nodes": self.nodes,
            "triangles": self.triangles,
            "edges": self.edges,
            "node_type": self.node_type.astype(np.int32),
            "control_volume": self.control_volume,
            "dual_volume": self.dual_volume,
        }
        return meta, arrays


@dataclass(frozen=True, eq=False)
class Pattern:
    """CSR sparsity of adjacency plus diagonal, with index maps into its data array."""

    indptr: np.ndarray
    indices: np.ndarray
    edge_pos: np.ndarray  # data position of each directed edge (mesh.edges order)
    diag_pos: np.ndarray
    rows: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n: int, edges: np.ndarray) -> "Pattern":
        diag = np.stack([np.arange(n), np.arange(n)], axis=1)
        allp = np.concatenate([edges, diag])
        order = np.lexsort((allp[:, 1], allp[:, 0]))
        allp = allp[order]
        pos = np.empty(len(order), dtype=np.int64)
        pos[order] = np.arange(len(order))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, allp[:, 0] + 1, 1)
        indptr = np.cumsum(indptr)
        ne = len(edges)
        return cls(
            indptr=_frozen(indptr, np.int64),
            indices=_frozen(allp[:, 1], np.int64),
            edge_pos=_frozen(pos[:ne], np.int64),
            diag_pos=_frozen(pos[ne:], np.int64),
            rows=_frozen(allp[:, 0], np.int64),
        )

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1


@dataclass(frozen=True, eq=False)
class EdgeGeometry:
    """Per-directed-edge geometry aligned with ``mesh.edges``.

    ``face_length`` and ``normal`` describe the median-dual face between the
    control volumes of i and j (``normal`` points from i towards j);
    ``alpha``/``beta`` are the angles opposite the edge in the triangle where
    i->j runs counter-clockwise and in the other triangle (NaN on the boundary).
    """

    face_length: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    cot_alpha: np.ndarray
    cot_beta: np.ndarray
    weight: np.ndarray
    distance: np.ndarray
    displacement: np.ndarray
    is_boundary: np.ndarray

    def projection(self, component: int) -> np.ndarray:
        """Scalar projection m_ij of the face normal on axis ``component``."""
        return self.normal[:, component]


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _undirected_triangle_count(triangles, n):
    counts: dict[int, int] = {}
    for k in range(3):
        a = triangles[:, k]
        b = triangles[:, (k + 1) % 3]
        key = np.minimum(a, b) * n + np.maximum(a, b)
        for kk in key.tolist():
            counts[kk] = counts.get(kk, 0) + 1
    return counts


def _boundary_nodes(triangles, n):
    counts = _undirected_triangle_count(triangles, n)
    out = np.zeros(n, dtype=bool)
    for key, c in counts.items():
        if c == 1:
            out[key // n] = True
            out[key % n] = True
    return out


def _incircle(a, b, c, d):
    """Positive when d lies strictly inside the circumcircle of CCW triangle abc."""
    m = np.array(
        [
            [a[0] - d[0], a[1] - d[1], (a[0] - d[0]) ** 2 + (a[1] - d[1]) ** 2],
            [b[0] - d[0], b[1] - d[1], (b[0] - d[0]) ** 2 + (b[1] - d[1]) ** 2],
            [c[0] - d[0], c[1] - d[1], (c[0] - d[0]) ** 2 + (c[1] - d[1]) ** 2],
        ]
    )
    return float(np.linalg.det(m))


def _legalize(points: np.ndarray, tris: np.ndarray, max_sweeps: int = 100) -> np.ndarray:
    """Lawson flips; cocircular ties keep the diagonal through the lowest node index."""
    tris = [list(t) for t in tris]
    for _ in range(max_sweeps):
        owner: dict[tuple[int, int], int] = {}
        for ti, t in enumerate(tris):
            for k in range(3):
                owner[(t[k], t[(k + 1) % 3])] = ti
        flipped = False
        done: set[int] = set()
        for (a, b), t1 in sorted(owner.items()):
            t2 = owner.get((b, a))
            if t2 is None or a > b or t1 in done or t2 in done:
                continue
            c = next(v for v in tris[t1] if v != a and v != b)
            d = next(v for v in tris[t2] if v != a and v != b)
            pa, pb, pc, pd = points[a], points[b], points[c], points[d]
            scale = max(np.sum((pa - pd) ** 2), np.sum((pb - pd) ** 2), np.sum((pc - pd) ** 2))
            det = _incircle(pa, pb, pc, pd)
            tol = 1e-9 * scale * scale
            if det > tol:
                flip = True
            elif det >= -tol:
                flip = min(c, d) < min(a, b)
            else:
                flip = False
            if flip and _cross(pa - pc, pd - pc) > 0 and _cross(pb - pd, pc - pd) > 0:
                tris[t1] = [c, a, d]
                tris[t2] = [d, b, c]
                done.update((t1, t2))
                flipped = True
        if not flipped:
            break
    return np.array(tris, dtype=np.int64)


def triangulate(points: np.ndarray) -> np.ndarray:
    """Delaunay triangulation with counter-clockwise triangles and deterministic ties."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 3:
        raise MeshError("need at least three 2-D points")
    _, inv, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts > 1):
        dup = np.flatnonzero(counts[np.ravel(inv)] > 1)
        raise MeshError(f"duplicate points at indices {dup.tolist()}")
    try:
        tri = Delaunay(points)
    except QhullError as exc:
        raise MeshError(f"triangulation failed; point set is degenerate (collinear): indices {list(range(len(points)))}") from exc
    if len(tri.coplanar):
        raise MeshError(f"points {sorted(tri.coplanar[:, 0].tolist())} were dropped by the triangulator")
    tris = np.array(tri.simplices, dtype=np.int64)
    p = points[tris]
    orient = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    tris[orient < 0] = tris[orient < 0][:, [0, 2, 1]]
    tris = _legalize(points, tris)
    # canonical order: rotate each triangle so its smallest index leads, then sort rows
    lead = np.argmin(tris, axis=1)
    tris = np.stack([tris[np.arange(len(tris)), (lead + k) % 3] for k in range(3)], axis=1)
    return tris[np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))]


def compute_control_volumes(nodes: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (mixed Voronoi area, median-dual area) per node.

    Non-obtuse triangles contribute circumcentric Voronoi pieces; an obtuse
    triangle gives half its area to the obtuse vertex and a quarter to each
    of the others. Both arrays sum to the triangulated area.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    p = nodes[triangles]
    e = [p[:, (k + 2) % 3] - p[:, (k + 1) % 3] for k in range(3)]  # edge opposite vertex k
    area2 = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    bad = np.flatnonzero(np.abs(area2) <= 1e-14 * np.max(np.abs(nodes)) ** 2)
    if len(bad):
        raise MeshError(f"zero-area triangle at index {int(bad[0])}")
    area = 0.5 * np.abs(area2)
    # dot of the two edges leaving vertex k
    dots = np.stack(
        [np.sum((p[:, (k + 1) % 3] - p[:, k]) * (p[:, (k + 2) % 3] - p[:, k]), axis=1) for k in range(3)],
        axis=1,
    )
    cot = dots / (2.0 * area[:, None])
    sq = np.stack([np.sum(e[k] ** 2, axis=1) for k in range(3)], axis=1)
    n = len(nodes)
    mixed = np.zeros(n)
    obtuse = dots < 0
    any_obtuse = obtuse.any(axis=1)
    for k in range(3):
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        # edge (k,k1) is opposite k2; edge (k,k2) is opposite k1
        vor = (sq[:, k2] * cot[:, k2] + sq[:, k1] * cot[:, k1]) / 8.0
        part = np.where(any_obtuse, np.where(obtuse[:, k], area / 2.0, area / 4.0), vor)
        np.add.at(mixed, triangles[:, k], part)
    dual = np.zeros(n)
    for k in range(3):
        np.add.at(dual, triangles[:, k], area / 3.0)
    return mixed, dual


def _directed_edges(triangles: np.ndarray, n: int) -> np.ndarray:
    e = np.concatenate([triangles[:, [k, (k + 1) % 3]] for k in range(3)])
    e = np.concatenate([e, e[:, ::-1]])
    key = np.unique(e[:, 0] * n + e[:, 1])
    return np.stack([key // n, key % n], axis=1)


def from_triangulation(nodes: np.ndarray, triangles: np.ndarray, units: str = "dimensionless") -> Mesh:
    """Assemble a mesh from a triangulation; hull nodes are tagged Neumann."""
    nodes = np.asarray(nodes, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    n = len(nodes)
    if triangles.size == 0 or triangles.min() < 0 or triangles.max() >= n:
        raise MeshError("triangle indices out of range")
    p = nodes[triangles]
    orient = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    triangles = triangles.copy()
    triangles[orient < 0] = triangles[orient < 0][:, [0, 2, 1]]
    mixed, dual = compute_control_volumes(nodes, triangles)
    bnd = _boundary_nodes(triangles, n)
    node_type = np.where(bnd, NodeType.NEUMANN, NodeType.INTERIOR).astype(np.int8)
    return Mesh(
        nodes=nodes,
        triangles=triangles,
        edges=_directed_edges(triangles, n),
        node_type=node_type,
        control_volume=mixed,
        dual_volume=dual,
        units=units,
    )


def build_perturbed_grid(nx: int, ny: int, jitter: float = 0.0, seed: int = 0, *, extent=(1.0, 1.0)) -> Mesh:
    """Jittered ``nx`` x ``ny`` grid on a rectangle, Delaunay-triangulated.

    Interior nodes move by uniform offsets of at most ``jitter`` grid spacings
    per axis; boundary nodes stay on the rectangle edges.
    """
    if nx < 3 or ny < 3:
        raise MeshError("nx and ny must be >= 3")
    if not 0.0 <= jitter < 0.5:
        raise MeshError("jitter must lie in [0, 0.5)")
    lx, ly = extent
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    on_edge = (
        (np.arange(nx * ny) % nx == 0)
        | (np.arange(nx * ny) % nx == nx - 1)
        | (np.arange(nx * ny) // nx == 0)
        | (np.arange(nx * ny) // nx == ny - 1)
    )
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-jitter, jitter, size=pts.shape) * np.array([lx / (nx - 1), ly / (ny - 1)])
    pts[~on_edge] += offsets[~on_edge]
    return from_triangulation(pts, triangulate(pts))


def compute_edge_geometry(mesh: Mesh) -> EdgeGeometry:
    nodes, tris, n = mesh.nodes, mesh.triangles, mesh.n_nodes
    edges = mesh.edges
    key = edges[:, 0] * n + edges[:, 1]
    index = {k: e for e, k in enumerate(key.tolist())}
    ne = len(edges)
    alpha = np.full(ne, np.nan)
    beta = np.full(ne, np.nan)
    face = np.zeros((ne, 2))
    p = tris
    centroid = nodes[tris].mean(axis=1)
    for k in range(3):
        i, j, o = p[:, k], p[:, (k + 1) % 3], p[:, (k + 2) % 3]
        u = nodes[i] - nodes[o]
        v = nodes[j] - nodes[o]
        ang = np.arctan2(np.abs(_cross(u, v)), np.sum(u * v, axis=1))
        fwd = np.array([index[a * n + b] for a, b in zip(i.tolist(), j.tolist())], dtype=np.int64)
        bwd = np.array([index[b * n + a] for a, b in zip(i.tolist(), j.tolist())], dtype=np.int64)
        alpha[fwd] = ang
        beta[bwd] = ang
        m = 0.5 * (nodes[i] + nodes[j])
        g = centroid - m
        s = np.stack([g[:, 1], -g[:, 0]], axis=1)  # clockwise rotation: points from i to j in a CCW triangle
        np.add.at(face, fwd, s)
        np.add.at(face, bwd, -s)
    disp = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    dist = np.linalg.norm(disp, axis=1)
    if np.any(dist <= 0):
        raise MeshError(f"zero-length edge at index {int(np.flatnonzero(dist <= 0)[0])}")
    flen = np.linalg.norm(face, axis=1)
    if np.any(flen <= 0):
        raise MeshError(f"degenerate dual face at edge {int(np.flatnonzero(flen <= 0)[0])}")
    normal = face / flen[:, None]
    cot_a = 1.0 / np.tan(alpha)
    cot_b = 1.0 / np.tan(beta)
    boundary = np.isnan(alpha) | np.isnan(beta)
    weight = 0.5 * (np.nan_to_num(cot_a, nan=0.0) + np.nan_to_num(cot_b, nan=0.0))
    return EdgeGeometry(
        face_length=_frozen(flen, np.float64),
        normal=_frozen(normal, np.float64),
        alpha=_frozen(alpha, np.float64),
        beta=_frozen(beta, np.float64),
        cot_alpha=_frozen(cot_a, np.float64),
        cot_beta=_frozen(cot_b, np.float64),
        weight=_frozen(weight, np.float64),
        distance=_frozen(dist, np.float64),
        displacement=_frozen(disp, np.float64),
        is_boundary=_frozen(boundary, bool),
    )


def is_delaunay(mesh: Mesh, rtol: float = 1e-9) -> bool:
    """Brute-force empty-circumcircle check against every node."""
    pts = mesh.nodes
    for t in mesh.triangles:
        a, b, c = pts[t]
        d = 2.0 * _cross(b - a, c - a)
        ux = (np.dot(a, a) * (b[1] - c[1]) + np.dot(b, b) * (c[1] - a[1]) + np.dot(c, c) * (a[1] - b[1])) / d
        uy = (np.dot(a, a) * (c[0] - b[0]) + np.dot(b, b) * (a[0] - c[0]) + np.dot(c, c) * (b[0] - a[0])) / d
        r2 = (a[0] - ux) ** 2 + (a[1] - uy) ** 2
        d2 = (pts[:, 0] - ux) ** 2 + (pts[:, 1] - uy) ** 2
        mask = np.ones(len(pts), dtype=bool)
        mask[t] = False
        if np.any(d2[mask] < r2 * (1.0 - rtol)):
            return False
    return True


def save_mesh(mesh: Mesh, path: str | Path) -> str:
    return container.write(path, *mesh._payload())


def load_mesh(path: str | Path) -> Mesh:
    meta, arr = container.read(path)
    if meta.get("kind") != "mesh":
        raise container.ContainerError(f"{path} does not hold a mesh")
    return Mesh(
        nodes=arr["nodes"],
        triangles=arr["triangles"],
        edges=arr["edges"],
        node_type=arr["node_type"].astype(np.int8),
        control_volume=arr["control_volume"],
        dual_volume=arr["dual_volume"],
        units=meta.get("units", "dimensionless"),
    )
