"""Orthonormal tangent bases at the identity warp.

* ``[0, 1]``: sine functions ``sqrt(2) sin(k pi x)``, which vanish at both ends.
* ``S^2``: normalised gradients of real spherical harmonics and the same
  fields rotated by a quarter turn (divergence free).

Harmonics are evaluated from their Cartesian closed form
``Y_l^m = N_lm (-1)^m P_l^(m)(z) (x + i y)^m`` so the surface gradient is
regular everywhere, including at the poles.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial, pi, sqrt

import numpy as np
from numpy.polynomial import legendre as npleg

from . import density
from .errors import ValidationError
from .geometry import Grid1D, Icosphere, project_tangent

MAX_DEGREE = 20


# ---------------------------------------------------------------------------
# [0, 1]
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BasisElement1D:
    k: int
    values: np.ndarray
    derivative: np.ndarray


class SineBasis:
    """Sequence of :class:`BasisElement1D` with stacked ``(M, n)`` arrays."""

    def __init__(self, grid: Grid1D, values, derivatives, ks):
        self.grid = grid
        self.values = values
        self.derivatives = derivatives
        self.ks = ks

    def __len__(self):
        return len(self.ks)

    @property
    def frequencies(self):
        return self.ks.astype(float)

    def __getitem__(self, i):
        return BasisElement1D(int(self.ks[i]), self.values[i], self.derivatives[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def assemble(self, coef):
        """Field and slope of ``sum_i coef_i b_i``."""
        coef = np.asarray(coef, dtype=float)
        return coef @ self.values, coef @ self.derivatives


def sine_basis(grid: Grid1D, M: int) -> SineBasis:
    if M < 1:
        raise ValidationError("basis size must be positive")
    if M > grid.n // 2:
        raise ValidationError(f"M={M} exceeds the Nyquist limit n/2={grid.n // 2}")
    x = grid.points
    ks = np.arange(1, M + 1)
    vals = np.sqrt(2.0) * np.sin(np.pi * np.outer(ks, x))
    vals[:, 0] = 0.0
    vals[:, -1] = 0.0
    ders = np.sqrt(2.0) * np.pi * ks[:, None] * np.cos(np.pi * np.outer(ks, x))
    return SineBasis(grid, vals, ders, ks)


# ---------------------------------------------------------------------------
# Real spherical harmonics
# ---------------------------------------------------------------------------

def harmonic_index(L: int):
    """``(l, m, part)`` for each real harmonic up to degree ``L``.

    Order: Y_0^0, Y_1^0, Re Y_1^1, Im Y_1^1, Y_2^0, Re Y_2^1, Im Y_2^1, ...
    ``part`` is 0 for the real part and 1 for the imaginary part.
    """
    out = []
    for l in range(L + 1):
        out.append((l, 0, 0))
        for m in range(1, l + 1):
            out.append((l, m, 0))
            out.append((l, m, 1))
    return out


def _norm_const(l, m):
    return sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m))


def _harmonic_parts(L, points, with_gradient):
    if L > MAX_DEGREE:
        raise ValidationError(f"degree {L} exceeds the supported maximum {MAX_DEGREE}")
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    w = x + 1j * y
    idx = harmonic_index(L)
    vals = np.empty((len(idx),) + p.shape[:-1])
    grads = np.empty((len(idx),) + p.shape) if with_gradient else None
    for i, (l, m, part) in enumerate(idx):
        coef = np.zeros(l + 1)
        coef[l] = 1.0
        dm = npleg.legder(coef, m) if m else coef
        g = npleg.legval(z, dm)
        scale = _norm_const(l, m) * (-1) ** m * (sqrt(2.0) if m else 1.0)
        wm = w ** m
        val = scale * g * wm
        pick = np.imag if part else np.real
        vals[i] = pick(val)
        if with_gradient:
            gz = npleg.legval(z, npleg.legder(dm)) if l > m else np.zeros_like(z)
            dxy = scale * g * m * w ** (m - 1) if m else np.zeros_like(w)
            amb = np.stack([pick(dxy), pick(1j * dxy), pick(scale * gz * wm)], axis=-1)
            grads[i] = project_tangent(p, amb)
    return idx, vals, grads


def real_spherical_harmonics(L: int, points):
    """Values of all real harmonics of degree <= ``L``, shape ``((L+1)^2, ...)``.

    ``m > 0`` parts carry a factor sqrt(2) so the family is orthonormal in
    L2(S^2).
    """
    return _harmonic_parts(L, points, False)[1]


def harmonic_gradients(L: int, points):
    """``(index, values, surface_gradients)`` for all real harmonics up to ``L``."""
    return _harmonic_parts(L, points, True)


# ---------------------------------------------------------------------------
# Tangent fields on S^2
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HarmonicBasisElement:
    """Normalised gradient (``kind="gradient"``) or rotated gradient field.

    ``field`` is (V, 3) Cartesian tangent vectors, ``divergence`` is (V,),
    ``scale`` is the quadrature norm of the raw gradient used to normalise.
    """

    l: int
    m: int
    part: int
    kind: str
    field: np.ndarray
    divergence: np.ndarray
    scale: float

    def evaluate(self, points):
        """Evaluate the normalised field at arbitrary points on the sphere."""
        return tangent_field_at(self, points)


def tangent_field_at(element: HarmonicBasisElement, points):
    idx, _, grads = harmonic_gradients(element.l, points)
    i = idx.index((element.l, element.m, element.part))
    g = grads[i]
    if element.kind == "rotated":
        g = np.cross(np.asarray(points, dtype=float), g)
    return g / element.scale


class HarmonicBasis:
    """Sequence of :class:`HarmonicBasisElement` with stacked arrays.

    ``fields`` has shape (M, V, 3), ``divergence`` (M, V) and
    ``frame_coords`` (M, V, 2) holds each field in the vertex frames.
    """

    def __init__(self, ico: Icosphere, elements):
        self.ico = ico
        self.elements = list(elements)
        self.fields = np.stack([e.field for e in self.elements])
        self.divergence = np.stack([e.divergence for e in self.elements])
        w1, w2 = ico.frames
        self.frame_coords = np.stack(
            [np.sum(self.fields * w1, axis=-1), np.sum(self.fields * w2, axis=-1)], axis=-1)

    def __len__(self):
        return len(self.elements)

    @property
    def frequencies(self):
        """Harmonic degree of each element."""
        return np.array([e.l for e in self.elements], dtype=float)

    def __getitem__(self, i):
        return self.elements[i]

    def __iter__(self):
        return iter(self.elements)

    def discrete_divergence(self, delta=None):
        """Divergences as seen by the mesh Jacobian scheme, shape (M, V); cached per ``delta``."""
        delta = density.JACOBIAN_STEP if delta is None else delta
        cache = self.__dict__.setdefault("_ddiv", {})
        if delta not in cache:
            cache[delta] = np.stack(
                [density.discrete_divergence(self.ico, e.field, delta) for e in self.elements])
        return cache[delta]

    def divergences(self, kind="discrete", delta=None):
        return self.divergence if kind == "analytic" else self.discrete_divergence(delta)

    def assemble(self, coef, divergence="analytic", delta=None):
        """Tangent field and divergence of ``sum_i coef_i b_i``."""
        coef = np.asarray(coef, dtype=float)
        return (np.tensordot(coef, self.fields, axes=1),
                coef @ self.divergences(divergence, delta))


def harmonic_tangent_basis(ico: Icosphere, L: int) -> HarmonicBasis:
    """Gradient and rotated-gradient fields of the real harmonics with ``1 <= l <= L``.

    Normalisation uses the vertex quadrature of ``ico``.  The gradient field
    of ``psi`` has divergence ``-l(l+1) psi / ||grad psi||``; the rotated
    field ``n x grad psi`` is divergence free.
    """
    if L < 1:
        raise ValidationError("harmonic tangent basis needs L >= 1")
    v = ico.vertices
    w = ico.vertex_weights
    idx, vals, grads = harmonic_gradients(L, v)
    elements = []
    for i, (l, m, part) in enumerate(idx):
        if l == 0:
            continue
        g = grads[i]
        scale = float(np.sqrt(np.sum(w * np.sum(g * g, axis=-1))))
        div = -l * (l + 1) * vals[i] / scale
        elements.append(HarmonicBasisElement(l, m, part, "gradient", g / scale, div, scale))
        rot = np.cross(v, g)
        rscale = float(np.sqrt(np.sum(w * np.sum(rot * rot, axis=-1))))
        elements.append(HarmonicBasisElement(l, m, part, "rotated", rot / rscale,
                                             np.zeros(len(v)), rscale))
    return HarmonicBasis(ico, elements)


def flux_divergence(element: HarmonicBasisElement, points, radius=1e-3, n_samples=16):
    """Divergence of an element's field from its outward flux through small geodesic circles.

    Uses only point evaluations of the field, so it checks the closed-form
    ``divergence`` independently of the mesh.  Error is ``O(radius^2)``.
    """
    from .geometry import tangent_frame

    p = np.atleast_2d(np.asarray(points, dtype=float))
    w1, w2 = tangent_frame(p)
    ang = 2 * pi * np.arange(n_samples) / n_samples
    flux = np.zeros(len(p))
    for a in ang:
        u = np.cos(a) * w1 + np.sin(a) * w2
        x = np.cos(radius) * p + np.sin(radius) * u
        normal = -np.sin(radius) * p + np.cos(radius) * u
        flux += np.sum(tangent_field_at(element, x) * normal, axis=-1)
    circumference = 2 * pi * np.sin(radius)
    area = 2 * pi * (1 - np.cos(radius))
    return flux / n_samples * circumference / area
