import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvrkit import field, mesh
from dvrkit.mesh import MeshError, TriangleMesh

from test_field import linear_field


def sphere_occupancy(p):
    return 1.0 - np.linalg.norm(p, axis=-1)


def test_analytic_sphere_vertices_near_radius():
    m = mesh.extract_isosurface(sphere_occupancy, 0.5, 64)
    cell = 2.0 / 63
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) <= 2 * cell)
    assert m.is_watertight()


def test_radial_error_shrinks_with_resolution():
    errs = [np.abs(np.linalg.norm(mesh.extract_isosurface(sphere_occupancy, 0.5, R).vertices, axis=1) - 0.5).max()
            for R in (16, 32, 64)]
    assert errs[0] > errs[1] > errs[2]


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.3, 1), st.floats(-0.4, 0.4), st.sampled_from([9, 16, 23]))
def test_linear_field_vertices_exact(a, b, c, off, R):
    n = np.array([a, b, c])
    m = mesh.extract_isosurface(lambda p: p @ n + off, 0.0, R)
    # vertices outside the bounds come from the padding that closes the surface
    inner = m.vertices[np.all(np.abs(m.vertices) <= 1.0, axis=1)]
    assert len(inner)
    # marching cubes interpolates in float32
    np.testing.assert_allclose(inner @ n + off, 0.0, atol=1e-6)


def test_extract_mesh_plane_and_colors():
    params = linear_field(0.2, n_blocks=2)
    m = mesh.extract_mesh(params, None, 24)
    cell = 2.0 / 23
    cap = m.vertices[np.all(np.abs(m.vertices) < 1.0, axis=1)]
    assert len(cap) and np.all(np.abs(cap[:, 2] - 0.2) <= 0.5 * cell)
    assert m.is_watertight()
    assert m.colors.shape == m.vertices.shape
    assert np.all((m.colors > 0) & (m.colors < 1))
    # normals point out of the occupied half-space (-z side is occupied)
    v = m.vertices[m.faces]
    v = v[np.all(np.abs(v) < 1.0, axis=(1, 2))]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all(normals[:, 2] > 0)


def test_constant_field_below_level_gives_empty_mesh():
    params = field.init_params(8, 2, rng=0)
    params.arrays["fc_out.W"][...] = 0.0
    params.arrays["fc_out.b"][0] = -3.0
    m = mesh.extract_mesh(params, None, 16)
    assert m.is_empty and not m.is_watertight()


def test_shape_touching_bounds_is_closed():
    m = mesh.extract_isosurface(lambda p: 1.0 - np.abs(p).max(axis=-1), 0.0, 12)
    assert m.is_watertight()


def test_torus_is_watertight():
    m = mesh.extract_isosurface(lambda p: 0.12 - np.hypot(np.hypot(p[:, 0], p[:, 1]) - 0.35, p[:, 2]), 0.0, 48)
    assert m.is_watertight()
    v, e, f = len(m.vertices), len(m.edge_face_counts()), len(m.faces)
    assert v - e + f == 0


def test_resolution_validated():
    with pytest.raises(MeshError):
        mesh.extract_mesh(linear_field(0.0), None, 1)


def test_bad_face_index_rejected():
    with pytest.raises(MeshError, match="out of range"):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_chamfer_examples():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    r = mesh.chamfer_l1(pts, pts)
    assert (r.accuracy, r.completeness, r.chamfer_l1) == (0, 0, 0)
    r = mesh.chamfer_l1([[0, 0, 0]], [[1, 0, 0]])
    assert (r.accuracy, r.completeness, r.chamfer_l1) == (1, 1, 1)
    with pytest.raises(MeshError, match="non-empty"):
        mesh.chamfer_l1(np.zeros((0, 3)), pts)


def test_chamfer_kdtree_matches_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(500, 3)), rng.uniform(-1, 1, size=(500, 3))
    fast, slow = mesh.chamfer_l1(a, b), mesh.chamfer_l1(a, b, brute=True)
    assert abs(fast.accuracy - slow.accuracy) < 1e-12
    assert abs(fast.completeness - slow.completeness) < 1e-12
    assert abs(fast.chamfer_l1 - slow.chamfer_l1) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 40))
def test_chamfer_symmetric(seed, na, nb):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(na, 3)), rng.normal(size=(nb, 3))
    ab, ba = mesh.chamfer_l1(a, b), mesh.chamfer_l1(b, a)
    assert ab.chamfer_l1 == pytest.approx(ba.chamfer_l1, abs=1e-15)
    assert ab.accuracy == ba.completeness
    assert ab.chamfer_l1 == pytest.approx(0.5 * (ab.accuracy + ab.completeness))


def test_samples_stay_in_triangle_plane():
    tri = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    pts = mesh.sample_surface(tri, 10_000, 0)
    assert np.abs(pts[:, 2]).max() <= 1e-12
    assert np.all(pts[:, :2] >= 0) and np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)


def test_samples_follow_area():
    two = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]],
                       [[0, 1, 2], [3, 4, 5]])
    pts = mesh.sample_surface(two, 100_000, 2)
    big = np.count_nonzero(pts[:, 0] < 5)
    assert big / (len(pts) - big) == pytest.approx(3.0, rel=0.05)


def test_sample_centroid():
    v = np.array([[0.2, -1.0, 0.5], [2.0, 0.3, 0.1], [-0.5, 1.5, 1.0]])
    pts = mesh.sample_surface(TriangleMesh(v, [[0, 1, 2]]), 50_000, 3)
    np.testing.assert_allclose(pts.mean(axis=0), v.mean(axis=0), atol=0.02 * np.abs(v).max())


def test_sample_surface_errors():
    with pytest.raises(MeshError, match="empty"):
        mesh.sample_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 10)
    with pytest.raises(MeshError, match="zero area"):
        mesh.sample_surface(TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]]), 10)


@pytest.mark.parametrize("suffix", [".obj", ".ply"])
def test_export_round_trip(tmp_path, suffix):
    m = mesh.extract_isosurface(sphere_occupancy, 0.5, 12)
    m.colors = np.random.default_rng(0).random(m.vertices.shape)
    mesh.save_mesh(tmp_path / f"m{suffix}", m)
    back = mesh.load_mesh(tmp_path / f"m{suffix}")
    np.testing.assert_array_equal(back.faces, m.faces)
    tol = 1e-7 if suffix == ".ply" else 1e-8
    np.testing.assert_allclose(back.vertices, m.vertices, atol=tol)
    np.testing.assert_allclose(back.colors, m.colors, atol=1 / 255 if suffix == ".ply" else 1e-6)
    assert back.is_watertight()


def test_unknown_mesh_extension(tmp_path):
    with pytest.raises(MeshError, match="unsupported"):
        mesh.save_mesh(tmp_path / "m.stl", TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


def test_evaluate_mesh_against_own_samples():
    m = mesh.extract_isosurface(sphere_occupancy, 0.5, 40)
    rep = mesh.evaluate_mesh(m, mesh.sample_surface(m, 20_000, 5), count=20_000)
    assert rep.chamfer_l1 < 0.01
