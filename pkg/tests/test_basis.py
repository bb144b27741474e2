import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conalign import basis as B
from conalign import geometry as geo
from conalign.errors import ValidationError

from conftest import random_unit


@pytest.fixture(scope="module")
def hb4(ico4):
    return B.harmonic_tangent_basis(ico4, 6)


# ---------------------------------------------------------------------------
# Sine basis
# ---------------------------------------------------------------------------

def test_sine_values_and_slopes():
    grid = geo.Grid1D(201)
    sb = B.sine_basis(grid, 5)
    assert sb[0].values[100] == pytest.approx(np.sqrt(2), abs=1e-15)
    assert sb[0].derivative[0] == pytest.approx(np.sqrt(2) * np.pi)
    assert sb[2].k == 3
    x = grid.points
    np.testing.assert_allclose(sb[3].derivative, np.sqrt(2) * 4 * np.pi * np.cos(4 * np.pi * x))


def test_sine_vanishes_at_endpoints(grid200):
    sb = B.sine_basis(grid200, 30)
    assert np.all(sb.values[:, 0] == 0) and np.all(sb.values[:, -1] == 0)


def test_sine_gram_is_identity(grid200):
    sb = B.sine_basis(grid200, 30)
    gram = sb.values * grid200.weights @ sb.values.T
    assert np.abs(gram - np.eye(30)).max() <= 1e-6


def test_sine_nyquist_guard(grid200):
    B.sine_basis(grid200, 100)
    with pytest.raises(ValidationError):
        B.sine_basis(grid200, 101)
    with pytest.raises(ValidationError):
        B.sine_basis(grid200, 0)


def test_sine_assemble(grid200):
    sb = B.sine_basis(grid200, 4)
    v, d = sb.assemble([1.0, 0, -2.0, 0])
    np.testing.assert_allclose(v, sb.values[0] - 2 * sb.values[2])
    np.testing.assert_allclose(d, sb.derivatives[0] - 2 * sb.derivatives[2])


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

def test_harmonic_ordering():
    idx = B.harmonic_index(2)
    assert idx[:4] == [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)]
    assert len(idx) == 9


def test_constant_and_zonal_harmonic():
    pts = random_unit(np.random.default_rng(0), 50)
    vals = B.real_spherical_harmonics(1, pts)
    np.testing.assert_allclose(vals[0], 1 / np.sqrt(4 * np.pi))
    assert vals[0, 0] == pytest.approx(0.28209, abs=1e-5)
    pole = B.real_spherical_harmonics(1, np.array([[0.0, 0.0, 1.0]]))
    assert pole[1, 0] == pytest.approx(np.sqrt(3 / (4 * np.pi)), abs=1e-14)
    np.testing.assert_allclose(vals[1], np.sqrt(3 / (4 * np.pi)) * pts[:, 2], atol=1e-14)


def test_degree_two_closed_forms():
    pts = random_unit(np.random.default_rng(1), 20)
    x, y, z = pts.T
    vals = B.real_spherical_harmonics(2, pts)
    c = np.sqrt(15 / (4 * np.pi))
    # (l, m) = (2, 2) real and imaginary parts
    np.testing.assert_allclose(vals[7], c / 2 * (x * x - y * y), atol=1e-13)
    np.testing.assert_allclose(vals[8], c * x * y, atol=1e-13)
    np.testing.assert_allclose(vals[4], np.sqrt(5 / (16 * np.pi)) * (3 * z * z - 1), atol=1e-13)


def test_harmonic_gram_at_level4(ico4):
    vals = B.real_spherical_harmonics(6, ico4.vertices)
    gram = vals * ico4.vertex_weights @ vals.T
    assert np.abs(gram - np.eye(49)).max() <= 1e-2


def test_degree_guard():
    with pytest.raises(ValidationError):
        B.real_spherical_harmonics(21, np.array([[0.0, 0, 1]]))


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    pts = random_unit(rng, 10)
    idx, vals, grads = B.harmonic_gradients(4, pts)
    h = 1e-6
    for p, g in zip(pts, grads.transpose(1, 0, 2)):
        u = geo.project_tangent(p, rng.standard_normal(3))
        u /= np.linalg.norm(u)
        fp = B.real_spherical_harmonics(4, geo.sphere_exp(p, h * u)[None])[:, 0]
        fm = B.real_spherical_harmonics(4, geo.sphere_exp(p, -h * u)[None])[:, 0]
        np.testing.assert_allclose((fp - fm) / (2 * h), g @ u, atol=1e-7)


# ---------------------------------------------------------------------------
# Tangent basis on the sphere
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("L", [1, 3, 6])
def test_element_count(ico2, L):
    assert len(B.harmonic_tangent_basis(ico2, L)) == 2 * ((L + 1) ** 2 - 1)


def test_basis_requires_positive_degree(ico2):
    with pytest.raises(ValidationError):
        B.harmonic_tangent_basis(ico2, 0)


def test_fields_are_tangent_and_normalised(hb4, ico4):
    v, w = ico4.vertices, ico4.vertex_weights
    assert np.abs(np.sum(hb4.fields * v, axis=-1)).max() <= 1e-10
    norms = np.sqrt(np.sum(w * np.sum(hb4.fields ** 2, axis=-1), axis=-1))
    assert np.abs(norms - 1).max() <= 1e-3


def test_gradient_and_rotated_pairs_orthogonal(hb4, ico4):
    for a, b in zip(hb4.elements[::2], hb4.elements[1::2]):
        assert a.kind == "gradient" and b.kind == "rotated" and (a.l, a.m, a.part) == (b.l, b.m, b.part)
        dots = np.sum(a.field * b.field, axis=-1)
        assert np.abs(dots).max() <= 1e-10
        assert abs(ico4.vertex_weights @ dots) <= 1e-10


def test_divergence_closed_form(hb4, ico4):
    vals = B.real_spherical_harmonics(6, ico4.vertices)
    idx = B.harmonic_index(6)
    for e in hb4:
        if e.kind == "rotated":
            assert np.all(e.divergence == 0)
        else:
            psi = vals[idx.index((e.l, e.m, e.part))]
            np.testing.assert_allclose(e.divergence, -e.l * (e.l + 1) * psi / e.scale)


def test_flux_divergence_of_rotated_fields(hb4, ico4):
    pts = ico4.vertices[::7]
    worst = max(np.abs(B.flux_divergence(e, pts)).max() for e in hb4 if e.kind == "rotated")
    assert worst <= 1e-3


def test_flux_divergence_of_degree_one_gradient(hb4, ico4):
    pts = ico4.vertices[::5]
    for e in hb4:
        if e.kind == "gradient" and e.l == 1:
            exact = e.divergence[::5]
            err = np.abs(B.flux_divergence(e, pts) - exact).max()
            assert err <= 1e-2 * np.abs(exact).max()


def test_evaluate_matches_vertex_field(hb4, ico4):
    e = hb4[17]
    np.testing.assert_allclose(e.evaluate(ico4.vertices[:40]), e.field[:40], atol=1e-13)


def test_assemble_linear(hb4):
    coef = np.zeros(len(hb4))
    coef[[0, 5]] = [2.0, -1.0]
    field, div = hb4.assemble(coef)
    np.testing.assert_allclose(field, 2 * hb4.fields[0] - hb4.fields[5])
    np.testing.assert_allclose(div, 2 * hb4.divergence[0] - hb4.divergence[5])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rotation_by_quarter_turn_preserves_length(seed):
    pts = random_unit(np.random.default_rng(seed), 8)
    idx, _, grads = B.harmonic_gradients(3, pts)
    rot = np.cross(pts, grads)
    np.testing.assert_allclose(np.linalg.norm(rot, axis=-1), np.linalg.norm(grads, axis=-1), atol=1e-13)
