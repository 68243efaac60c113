import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unimatch.errors import DegenerateError, DisconnectedError, ParseError, TopologyError
from unimatch.mesh import (
    TriangleMesh,
    all_pairs_geodesics,
    geodesic_distances,
    grid_mesh,
    icosphere,
    is_connected,
    load_mesh,
    save_mesh,
    total_area,
)

TRI = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def test_minimal_off(tmp_path):
    p = tmp_path / "tri.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    m = load_mesh(p)
    assert m.n == 3 and len(m.faces) == 1
    assert m.name == "tri"


def test_off_index_out_of_range(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n")
    with pytest.raises(TopologyError):
        load_mesh(p)


@pytest.mark.parametrize("text", ["OFF\n3 1\n0 0 0\n", "OFF\n3 1 0\n0 0 x\n1 0 0\n0 1 0\n3 0 1 2\n", "NOPE\n"])
def test_off_malformed(tmp_path, text):
    p = tmp_path / "bad.off"
    p.write_text(text)
    with pytest.raises(ParseError):
        load_mesh(p)


def test_icosphere_ply_roundtrip(tmp_path, sphere):
    p = tmp_path / "ico.ply"
    save_mesh(sphere, p)
    m = load_mesh(p)
    assert m.n == 642 and len(m.faces) == 1280
    np.testing.assert_array_equal(m.faces, sphere.faces)
    np.testing.assert_allclose(m.vertices, sphere.vertices, rtol=0, atol=0)


def test_off_roundtrip_preserves_order(tmp_path, sphere):
    p = tmp_path / "ico.off"
    save_mesh(sphere, p)
    np.testing.assert_array_equal(load_mesh(p).vertices, sphere.vertices)


def test_binary_ply_rejected(tmp_path):
    p = tmp_path / "b.ply"
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nend_header\n\x00\x81\xff")
    with pytest.raises(ParseError):
        load_mesh(p)


def test_unknown_format(tmp_path):
    with pytest.raises(ParseError):
        load_mesh(tmp_path / "x.stl")


def test_topology_checks():
    with pytest.raises(TopologyError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    with pytest.raises(TopologyError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])


def test_nonmanifold_flagged():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    with pytest.warns(UserWarning, match="non-manifold"):
        m = TriangleMesh(v, [[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    assert not m.is_manifold
    np.testing.assert_array_equal(m.nonmanifold_edges, [[0, 1]])


def test_area_single_triangle():
    assert total_area(TRI) == pytest.approx(0.5)


def test_area_two_disjoint_triangles():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]]
    assert total_area(TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])) == pytest.approx(1.0)


def test_area_icosphere(sphere):
    assert total_area(sphere) == pytest.approx(4 * np.pi, rel=0.02)


def test_area_degenerate():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(DegenerateError):
        total_area(m)


def test_geodesic_grid_strip():
    # 3x2 flat strip, unit spacing, area 2; bottom row is 0, 2, 4
    g = grid_mesh(3, 2)
    d = geodesic_distances(g, 0).distances
    np.testing.assert_allclose(d[[0, 2, 4]], np.array([0, 1, 2]) / np.sqrt(2.0))


def test_geodesic_self_zero(sphere):
    f = geodesic_distances(sphere, 17)
    assert f.source == 17 and f.distances[17] == 0.0
    assert np.all(np.isfinite(f.distances)) and np.all(f.distances >= 0)


def test_geodesic_antipodal(sphere):
    # graph metric overshoots the great circle; mean within 5%, worst case bounded
    v = sphere.vertices
    anti = np.argmin(v @ v.T, axis=1)
    rows = geodesic_distances(sphere, np.arange(sphere.n))
    got = rows[np.arange(sphere.n), anti]
    expect = np.pi / np.sqrt(total_area(sphere))
    rel = got / expect - 1
    assert abs(rel.mean()) <= 0.05
    assert rel.max() <= 0.07
    assert rel.min() >= -0.01


def test_geodesic_disconnected():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]]
    m = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    assert not is_connected(m)
    with pytest.raises(DisconnectedError):
        geodesic_distances(m, 0)


def test_geodesic_symmetric_and_triangle_inequality(small_sphere, rng):
    D = all_pairs_geodesics(small_sphere)
    np.testing.assert_allclose(D, D.T, atol=1e-12)
    i, j, k = rng.integers(0, small_sphere.n, size=(3, 200))
    assert np.all(D[i, k] <= D[i, j] + D[j, k] + 1e-12)


@given(st.floats(0.01, 100.0))
def test_geodesic_scale_invariant(s):
    m = icosphere(1)
    scaled = TriangleMesh(m.vertices * s, m.faces)
    np.testing.assert_allclose(geodesic_distances(scaled, 3).distances, geodesic_distances(m, 3).distances,
                               rtol=1e-9, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_area_bounds(seed):
    r = np.random.default_rng(seed)
    m = TriangleMesh(r.standard_normal((6, 3)), [[0, 1, 2], [2, 3, 4], [4, 5, 0], [1, 3, 5]])
    assert total_area(m) >= m.face_areas.max()


def test_submesh_returns_original_indices(sphere):
    keep = sphere.vertices[:, 2] > 0
    sub, used = sphere.submesh(keep)
    np.testing.assert_array_equal(sub.vertices, sphere.vertices[used])
    assert np.all(keep[used])


def test_digest_changes_with_geometry(sphere):
    moved = TriangleMesh(sphere.vertices * 1.01, sphere.faces)
    assert moved.digest() != sphere.digest()
    assert TriangleMesh(sphere.vertices, sphere.faces).digest() == sphere.digest()
