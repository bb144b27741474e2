import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conalign import geometry as geo
from conalign.errors import DomainError, ResourceError, ValidationError

from conftest import random_tangent, random_unit


# ---------------------------------------------------------------------------
# Grid1D
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 17, 200])
def test_grid_points_and_weights(n):
    g = geo.Grid1D(n)
    assert g.points[0] == 0.0 and g.points[-1] == 1.0
    assert np.all(np.diff(g.points) > 0)
    assert abs(g.weights.sum() - 1.0) <= 1e-12


def test_grid_rejects_single_node():
    with pytest.raises(ValidationError):
        geo.Grid1D(1)


def test_grid_arrays_are_read_only():
    g = geo.Grid1D(10)
    with pytest.raises(ValueError):
        g.points[0] = 0.5


# ---------------------------------------------------------------------------
# Icosphere
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("level,count", [(0, 12), (1, 42), (4, 2562)])
def test_icosphere_vertex_counts(level, count):
    assert geo.build_icosphere(level).n_vertices == count


@pytest.mark.parametrize("level", range(0, 6))
def test_icosphere_invariants(level):
    ico = geo.build_icosphere(level)
    assert ico.n_vertices == 10 * 4 ** level + 2
    assert len(ico.faces) == 20 * 4 ** level
    assert np.abs(np.linalg.norm(ico.vertices, axis=1) - 1).max() <= 1e-12
    assert abs(ico.vertex_weights.sum() - 4 * np.pi) <= 1e-9
    areas = ico.face_areas
    assert areas.max() / areas.min() <= 2.0
    assert np.all(ico.face_adjacency >= 0)


@pytest.mark.parametrize("level", range(0, 5))
def test_icosphere_levels_are_nested(level):
    lo, hi = geo.build_icosphere(level), geo.build_icosphere(level + 1)
    assert np.array_equal(hi.vertices[:lo.n_vertices], lo.vertices)
    assert hi.coarsen_count(level) == lo.n_vertices


def test_icosphere_faces_point_outward(ico2):
    v, f = ico2.vertices, ico2.faces
    orient = np.sum(v[f[:, 0]] * np.cross(v[f[:, 1]], v[f[:, 2]]), axis=1)
    assert np.all(orient > 0)


def test_icosphere_deterministic():
    a, b = geo.build_icosphere(3), geo.build_icosphere(3)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)


def test_icosphere_level_guard():
    with pytest.raises(ResourceError):
        geo.build_icosphere(9)
    with pytest.raises(ValidationError):
        geo.build_icosphere(-1)


# ---------------------------------------------------------------------------
# locate
# ---------------------------------------------------------------------------

def test_locate_vertex(ico3):
    for i in [0, 5, 100, 641]:
        f, bary = geo.locate(ico3, ico3.vertices[i])
        corners = ico3.faces[f]
        assert i in corners
        assert bary[list(corners).index(i)] == pytest.approx(1.0, abs=1e-12)
        assert bary.sum() == pytest.approx(1.0, abs=1e-12)


def test_locate_edge_midpoint(ico3):
    a, b = ico3.faces[7, 0], ico3.faces[7, 1]
    m = ico3.vertices[a] + ico3.vertices[b]
    f, bary = geo.locate(ico3, m / np.linalg.norm(m))
    coords = dict(zip(ico3.faces[f], bary))
    assert coords[a] == pytest.approx(0.5, abs=1e-10)
    assert coords[b] == pytest.approx(0.5, abs=1e-10)


def test_locate_face_centroid(ico2):
    for fi in [0, 33, 319]:
        c = ico2.vertices[ico2.faces[fi]].mean(axis=0)
        f, bary = geo.locate(ico2, c / np.linalg.norm(c))
        assert f == fi
        np.testing.assert_allclose(bary, 1 / 3, atol=1e-6)


def test_locate_reconstruction(ico4):
    rng = np.random.default_rng(0)
    p = random_unit(rng, 10_000)
    f, bary = geo.locate(ico4, p)
    assert np.all(bary >= 0)
    np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-10)
    rec = np.einsum("mk,mkd->md", bary, ico4.vertices[ico4.faces[f]])
    rec /= np.linalg.norm(rec, axis=1, keepdims=True)
    assert np.abs(rec - p).max() <= 1e-3


def test_locate_hierarchy_matches_brute_force(ico3, monkeypatch):
    p = random_unit(np.random.default_rng(1), 3000)
    f1, b1 = geo.locate(ico3, p)
    monkeypatch.setattr(geo, "_BRUTE_FORCE_MAX_LEVEL", 8)
    f2, b2 = geo.locate(ico3, p)
    np.testing.assert_allclose(b1, b2, atol=1e-12)
    assert np.mean(f1 == f2) > 0.999  # points on shared edges may pick either face


def test_locate_warns_on_non_unit_input(ico2):
    with pytest.warns(RuntimeWarning):
        f, bary = geo.locate(ico2, np.array([0.0, 0.0, 2.0]))
    assert bary.max() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# exp / log / transport
# ---------------------------------------------------------------------------

def test_exp_zero_is_identity():
    x = np.array([0.6, 0.0, 0.8])
    assert np.array_equal(geo.sphere_exp(x, np.zeros(3)), x)


def test_exp_quarter_circle():
    out = geo.sphere_exp(np.array([0.0, 0.0, 1.0]), np.array([0.0, np.pi / 2, 0.0]))
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-15)


def test_log_of_self_and_orthogonal():
    x = np.array([1.0, 0.0, 0.0])
    assert np.linalg.norm(geo.sphere_log(x, x)) == 0.0
    assert np.linalg.norm(geo.sphere_log(x, np.array([0.0, 0.0, 1.0]))) == pytest.approx(np.pi / 2)


def test_log_antipodal_raises():
    x = np.array([0.0, 1.0, 0.0])
    with pytest.raises(DomainError):
        geo.sphere_log(x, -x)
    with pytest.raises(DomainError):
        geo.parallel_transport(x, -x, np.array([1.0, 0.0, 0.0]))


def test_exp_log_roundtrip_batch():
    rng = np.random.default_rng(2)
    x = random_unit(rng, 1000)
    v = random_tangent(rng, x)
    v *= (rng.uniform(0, 3.0, 1000) / np.linalg.norm(v, axis=1))[:, None]
    np.testing.assert_allclose(geo.sphere_log(x, geo.sphere_exp(x, v)), v, atol=1e-10)
    y = random_unit(rng, 1000)
    np.testing.assert_allclose(geo.sphere_exp(x, geo.sphere_log(x, y)), y, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(geo.sphere_log(x, y), axis=1),
                               np.arccos(np.clip(np.sum(x * y, 1), -1, 1)), atol=1e-7)


def test_parallel_transport_properties():
    rng = np.random.default_rng(3)
    x, y = random_unit(rng, 1000), random_unit(rng, 1000)
    v = random_tangent(rng, x)
    w = geo.parallel_transport(x, y, v)
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), np.linalg.norm(v, axis=1), atol=1e-10)
    assert np.abs(np.sum(w * y, axis=1)).max() <= 1e-10
    np.testing.assert_allclose(geo.parallel_transport(y, x, w), v, atol=1e-9)
    np.testing.assert_allclose(geo.parallel_transport(x, x, v), v, atol=1e-15)


def test_parallel_transport_moves_geodesic_velocity():
    # the velocity of a geodesic stays its velocity
    rng = np.random.default_rng(4)
    x = random_unit(rng, 50)
    v = random_tangent(rng, x, 0.5)
    y = geo.sphere_exp(x, v)
    w = geo.parallel_transport(x, y, v)
    np.testing.assert_allclose(w, -geo.sphere_log(y, x), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
       st.floats(-2.5, 2.5), st.floats(-2.5, 2.5))
def test_exp_log_roundtrip_property(a, b, c, s, t):
    x = np.array([a, b, c])
    if np.linalg.norm(x) < 1e-3:
        x = np.array([0.0, 0.0, 1.0])
    x = x / np.linalg.norm(x)
    w1, w2 = geo.tangent_frame(x)
    v = s * w1 + t * w2
    if np.linalg.norm(v) >= np.pi - 1e-3:
        return
    np.testing.assert_allclose(geo.sphere_log(x, geo.sphere_exp(x, v)), v, atol=1e-9)


# ---------------------------------------------------------------------------
# Coordinates and frames
# ---------------------------------------------------------------------------

def test_spherical_cartesian_examples():
    np.testing.assert_allclose(geo.spherical_to_cartesian(0.0, 1.3), [0, 0, 1], atol=1e-16)
    np.testing.assert_allclose(geo.spherical_to_cartesian(np.pi / 2, 0.0), [1, 0, 0], atol=1e-16)
    theta, phi, pole = geo.cartesian_to_spherical(np.array([0.0, 0.0, -1.0]))
    assert theta == pytest.approx(np.pi) and phi == 0.0 and pole


def test_spherical_cartesian_roundtrip():
    rng = np.random.default_rng(5)
    theta = rng.uniform(1e-3, np.pi - 1e-3, 1000)
    phi = rng.uniform(0, 2 * np.pi, 1000)
    t2, p2, pole = geo.cartesian_to_spherical(geo.spherical_to_cartesian(theta, phi))
    assert not pole.any()
    np.testing.assert_allclose(t2, theta, atol=1e-12)
    np.testing.assert_allclose(p2, phi, atol=1e-12)


def test_tangent_frame_orthonormal_everywhere(ico3):
    w1, w2 = ico3.frames
    v = ico3.vertices
    for a, b in [(w1, w1), (w2, w2)]:
        np.testing.assert_allclose(np.sum(a * b, 1), 1.0, atol=1e-12)
    for a, b in [(w1, w2), (w1, v), (w2, v)]:
        assert np.abs(np.sum(a * b, 1)).max() <= 1e-12
    # right-handed: w1 x w2 is the outward normal
    np.testing.assert_allclose(np.cross(w1, w2), v, atol=1e-12)
