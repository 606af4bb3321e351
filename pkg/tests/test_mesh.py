import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenmesh import mesh as M


def test_structured_3x3():
    m = M.build_perturbed_grid(3, 3, 0.0, 5)
    assert m.n_nodes == 9
    assert len(m.triangles) == 8


def test_unit_square_partition():
    m = M.build_perturbed_grid(4, 4, 0.0, 0)
    assert abs(m.control_volume.sum() - 1.0) <= 1e-10
    assert abs(m.dual_volume.sum() - 1.0) <= 1e-10


def test_uniform_grid_interior_volume():
    n = 6
    h = 1.0 / (n - 1)
    m = M.build_perturbed_grid(n, n, 0.0, 0)
    np.testing.assert_allclose(m.control_volume[m.interior], h * h, atol=1e-10)


def test_single_triangle_partition():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.3, 1.0]])
    m = M.from_triangulation(pts, np.array([[0, 1, 2]]))
    assert abs(m.control_volume.sum() - 1.0) <= 1e-12
    assert abs(m.dual_volume.sum() - 1.0) <= 1e-12


def test_obtuse_triangle_split():
    pts = np.array([[0.0, 0.0], [4.0, 0.0], [2.0, 0.5]])
    m = M.from_triangulation(pts, np.array([[0, 1, 2]]))
    area = 1.0
    np.testing.assert_allclose(m.control_volume, [area / 4, area / 4, area / 2])


def test_equilateral_lattice_hexagon():
    h = 0.1
    pts = [(i * h + 0.5 * h * (j % 2), j * h * np.sqrt(3) / 2) for j in range(7) for i in range(7)]
    pts = np.array(pts)
    m = M.from_triangulation(pts, M.triangulate(pts))
    centre = np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1))
    assert m.interior[centre]
    assert abs(m.control_volume[centre] - np.sqrt(3) / 2 * h * h) <= 1e-10


def test_cot_weights_right_isoceles(grid5):
    m, g = grid5
    d = g.displacement
    axis = (np.abs(d[:, 0]) < 1e-12) | (np.abs(d[:, 1]) < 1e-12)
    inner = m.interior[m.edges[:, 0]] & m.interior[m.edges[:, 1]]
    assert np.any(axis & inner) and np.any(~axis & inner)
    np.testing.assert_allclose(g.weight[axis & inner], 1.0, atol=1e-12)
    np.testing.assert_allclose(g.weight[~axis & inner], 0.0, atol=1e-12)


def test_displacement_norm_is_distance(jitter12):
    _, g = jitter12
    np.testing.assert_allclose(np.linalg.norm(g.displacement, axis=1), g.distance, atol=1e-12)


def test_edges_symmetric_and_sorted(jitter12):
    m, _ = jitter12
    e = m.edges
    assert np.all(e[:, 0] != e[:, 1])
    fwd = set(map(tuple, e.tolist()))
    assert all((j, i) in fwd for i, j in fwd)
    assert np.all(np.lexsort((e[:, 1], e[:, 0])) == np.arange(len(e)))


def test_delaunay_and_ccw(jitter12):
    m, _ = jitter12
    assert M.is_delaunay(m)
    p = m.nodes[m.triangles]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    assert np.all(cross > 0)


def test_deterministic_and_checksum():
    a = M.build_perturbed_grid(8, 7, 0.3, 11)
    b = M.build_perturbed_grid(8, 7, 0.3, 11)
    assert a.checksum() == b.checksum()
    assert a.checksum() != M.build_perturbed_grid(8, 7, 0.3, 12).checksum()


def test_save_load_roundtrip(tmp_path, jitter12):
    m, _ = jitter12
    m = m.with_dirichlet(m.boundary & (m.nodes[:, 0] < 1e-12))
    M.save_mesh(m, tmp_path / "m.dgm")
    m2 = M.load_mesh(tmp_path / "m.dgm")
    assert m2.checksum() == m.checksum()
    np.testing.assert_array_equal(m2.node_type, m.node_type)


def test_duplicate_points_rejected():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(M.MeshError, match="duplicate"):
        M.triangulate(pts)


def test_collinear_rejected():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(M.MeshError):
        M.triangulate(pts)


def test_bad_grid_args():
    with pytest.raises(M.MeshError):
        M.build_perturbed_grid(2, 5)
    with pytest.raises(M.MeshError):
        M.build_perturbed_grid(5, 5, 0.6)


def test_dirichlet_mask_interior_rejected(grid5):
    m, _ = grid5
    with pytest.raises(M.MeshError):
        m.with_dirichlet(m.interior)


@settings(max_examples=15, deadline=None)
@given(st.integers(3, 9), st.integers(3, 9), st.floats(0.0, 0.45), st.integers(0, 1000))
def test_volume_partition_property(nx, ny, jitter, seed):
    m = M.build_perturbed_grid(nx, ny, jitter, seed)
    assert np.all(m.control_volume > 0)
    assert abs(m.control_volume.sum() - 1.0) <= 1e-10
    assert abs(m.dual_volume.sum() - 1.0) <= 1e-10
