"""Grids and differential-geometric primitives on [0, 1] and the unit sphere.

Everything here is vectorised over leading axes: a point set is an array of
shape ``(..., 3)`` and tangent vectors share that shape.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError, ResourceError, ValidationError

MAX_ICO_LEVEL = 8
ANTIPODAL_TOL = 1e-8
_POLE_TOL = 1e-12


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# [0, 1]
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid1D:
    """Uniform grid on [0, 1] (both endpoints included) with trapezoid weights."""

    n: int

    def __post_init__(self):
        if int(self.n) < 2:
            raise ValidationError(f"Grid1D needs at least 2 nodes, got {self.n}")

    @cached_property
    def points(self) -> np.ndarray:
        return _readonly(np.linspace(0.0, 1.0, self.n))

    @cached_property
    def weights(self) -> np.ndarray:
        h = 1.0 / (self.n - 1)
        w = np.full(self.n, h)
        w[0] = w[-1] = 0.5 * h
        return _readonly(w)

    @property
    def spacing(self) -> float:
        return 1.0 / (self.n - 1)

    def __eq__(self, other):
        return isinstance(other, Grid1D) and other.n == self.n

    def __hash__(self):
        return hash(("Grid1D", self.n))


# ---------------------------------------------------------------------------
# Sphere: coordinates, exp/log, transport
# ---------------------------------------------------------------------------

def _dot(a, b):
    return np.sum(a * b, axis=-1)


def spherical_to_cartesian(theta, phi):
    """Map polar angle ``theta`` in [0, pi] and azimuth ``phi`` to unit vectors."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def cartesian_to_spherical(p):
    """Inverse of :func:`spherical_to_cartesian`.

    Returns ``(theta, phi, at_pole)``.  At the poles the azimuth is undefined;
    ``phi`` is reported as 0 there and ``at_pole`` is True.
    """
    p = np.asarray(p, dtype=float)
    z = np.clip(p[..., 2], -1.0, 1.0)
    theta = np.arccos(z)
    rho = np.hypot(p[..., 0], p[..., 1])
    at_pole = rho < _POLE_TOL
    phi = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2 * np.pi)
    phi = np.where(at_pole, 0.0, phi)
    return theta, phi, at_pole


def tangent_frame(p):
    """Orthonormal, positively oriented tangent frame ``(w_theta, w_phi)`` at ``p``.

    Away from the poles this is the coordinate frame ``(dPsi/dtheta,
    dPsi/dphi / sin(theta))``.  At the poles the frame is the ``phi = 0``
    limit: ``(x, y)`` at the north pole and ``(-x, y)`` at the south pole.
    """
    p = np.asarray(p, dtype=float)
    rho = np.hypot(p[..., 0], p[..., 1])
    safe = np.where(rho < _POLE_TOL, 1.0, rho)
    cphi = np.where(rho < _POLE_TOL, 1.0, p[..., 0] / safe)
    sphi = np.where(rho < _POLE_TOL, 0.0, p[..., 1] / safe)
    z = np.clip(p[..., 2], -1.0, 1.0)
    # cos(theta) = z, sin(theta) = rho
    w_theta = np.stack([z * cphi, z * sphi, -rho], axis=-1)
    w_theta = np.where((rho < _POLE_TOL)[..., None],
                       np.stack([np.sign(z) * cphi, sphi, 0 * z], axis=-1), w_theta)
    w_phi = np.stack([-sphi, cphi, np.zeros_like(z)], axis=-1)
    return w_theta, w_phi


def project_tangent(p, v):
    """Remove the component of ``v`` normal to the sphere at ``p``."""
    return v - _dot(p, v)[..., None] * p


def sphere_exp(x, v):
    """Exponential map: follow the great circle from ``x`` with velocity ``v``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = np.linalg.norm(v, axis=-1)
    small = nv < 1e-12
    safe = np.where(small, 1.0, nv)
    out = np.cos(nv)[..., None] * x + (np.sin(nv) / safe)[..., None] * v
    out = np.where(small[..., None], x, out)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def sphere_log(x, y):
    """Inverse of :func:`sphere_exp`; raises :class:`DomainError` for antipodal pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c = np.clip(_dot(x, y), -1.0, 1.0)
    if np.any(c < -1.0 + ANTIPODAL_TOL):
        raise DomainError("sphere_log is undefined for antipodal points")
    u = y - c[..., None] * x
    nu = np.linalg.norm(u, axis=-1)
    # atan2 is accurate for nearly coincident points, where arccos is not
    theta = np.arctan2(nu, c)
    small = nu < 1e-300
    scale = np.where(small, 0.0, theta / np.where(small, 1.0, nu))
    return scale[..., None] * u


def sphere_distance(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.arctan2(np.linalg.norm(np.cross(x, y), axis=-1), _dot(x, y))


def parallel_transport(x, y, v):
    """Transport tangent vector ``v`` at ``x`` to ``y`` along the minimal geodesic.

    Closed form ``v - <y, v> / (1 + <x, y>) (x + y)``; an isometry between
    tangent planes.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    c = _dot(x, y)
    if np.any(c < -1.0 + ANTIPODAL_TOL):
        raise DomainError("parallel transport is undefined between antipodal points")
    coef = _dot(y, v) / (1.0 + c)
    return v - coef[..., None] * (x + y)


def spherical_triangle_area(a, b, c):
    """Solid angle of the geodesic triangle ``abc`` (Van Oosterom & Strackee)."""
    num = np.abs(_dot(a, np.cross(b, c)))
    den = 1.0 + _dot(a, b) + _dot(b, c) + _dot(c, a)
    return 2.0 * np.arctan2(num, den)


# ---------------------------------------------------------------------------
# Icosphere
# ---------------------------------------------------------------------------

def _base_icosahedron():
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        a = 2 * np.pi * k / 5
        verts.append((r * np.cos(a), r * np.sin(a), z))
    for k in range(5):
        a = 2 * np.pi * k / 5 + np.pi / 5
        verts.append((r * np.cos(a), r * np.sin(a), -z))
    verts.append((0.0, 0.0, -1.0))
    verts = np.array(verts)

    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces += [(0, u0, u1), (u0, l0, u1), (u1, l0, l1), (11, l1, l0)]
    faces = np.array(faces)
    # orient every face counter-clockwise seen from outside
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    flip = _dot(a, np.cross(b, c)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return verts, faces


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        idx = cache.get(key)
        if idx is None:
            m = np.add(verts[i], verts[j])
            m = m / np.linalg.norm(m)
            idx = len(verts)
            verts.append(tuple(m))
            cache[key] = idx
        return idx

    out = np.empty((4 * len(faces), 3), dtype=np.int64)
    for f, (a, b, c) in enumerate(faces):
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out[4 * f:4 * f + 4] = ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))
    return np.array(verts), out


def _face_adjacency(faces):
    edge_owner = {}
    adj = np.full(faces.shape, -1, dtype=np.int64)
    for f, tri in enumerate(faces):
        for k in range(3):
            i, j = tri[(k + 1) % 3], tri[(k + 2) % 3]
            key = (min(i, j), max(i, j))
            other = edge_owner.pop(key, None)
            if other is None:
                edge_owner[key] = (f, k)
            else:
                g, kk = other
                adj[f, k] = g
                adj[g, kk] = f
    return adj


@dataclass(frozen=True, eq=False)
class Icosphere:
    """Recursively subdivided icosahedron projected onto the unit sphere.

    ``face_hierarchy[g]`` holds the faces of level ``g``; the children of
    face ``f`` at level ``g`` are faces ``4f .. 4f+3`` at level ``g + 1``.
    The first ``10 * 4**g + 2`` vertices are exactly the level-``g`` grid.
    """

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    vertex_weights: np.ndarray
    face_adjacency: np.ndarray
    face_hierarchy: tuple

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def weights(self) -> np.ndarray:
        return self.vertex_weights

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return _readonly(spherical_triangle_area(v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]))

    @cached_property
    def frames(self):
        """Per-vertex orthonormal tangent frame, arrays of shape (V, 3)."""
        w1, w2 = tangent_frame(self.vertices)
        return _readonly(w1), _readonly(w2)

    @cached_property
    def _edge_planes(self):
        # per level: (F, 3, 3) array whose k-th row gives the unnormalised
        # k-th barycentric coordinate as a dot product with the query point
        planes = []
        v = self.vertices
        for faces in self.face_hierarchy:
            a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
            planes.append(np.stack([np.cross(b, c), np.cross(c, a), np.cross(a, b)], axis=1))
        return planes

    def coarsen_count(self, level: int) -> int:
        """Number of vertices of the nested level-``level`` grid."""
        return 10 * 4 ** level + 2


def build_icosphere(level: int) -> Icosphere:
    """Build the level-``level`` icosphere with ``10 * 4**level + 2`` vertices."""
    level = int(level)
    if level < 0:
        raise ValidationError("icosphere level must be non-negative")
    if level > MAX_ICO_LEVEL:
        raise ResourceError(f"icosphere level {level} exceeds the guard of {MAX_ICO_LEVEL}")
    verts, faces = _base_icosahedron()
    hierarchy = [faces]
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
        hierarchy.append(faces)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)

    areas = spherical_triangle_area(verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]])
    weights = np.zeros(len(verts))
    for k in range(3):
        np.add.at(weights, faces[:, k], areas / 3.0)

    return Icosphere(
        level=level,
        vertices=_readonly(verts),
        faces=_readonly(faces),
        vertex_weights=_readonly(weights),
        face_adjacency=_readonly(_face_adjacency(faces)),
        face_hierarchy=tuple(_readonly(f) for f in hierarchy),
    )


_BRUTE_FORCE_MAX_LEVEL = 0
_TIE_TOL = 1e-12
_ROUNDOFF = 1e-14


def _pick(lam, candidates):
    """Choose, per point, the candidate face whose barycentrics are most inside.

    ``lam`` has shape (m, k, 3); ties (within ``_TIE_TOL``) go to the
    candidate listed first, i.e. the lower face index.
    """
    s = lam.sum(axis=-1)
    score = np.where(s > 0, lam.min(axis=-1) / np.where(s > 0, s, 1.0), -np.inf)
    best = score.max(axis=1, keepdims=True)
    first = np.argmax(score >= best - _TIE_TOL, axis=1)
    rows = np.arange(len(lam))
    return candidates[rows, first] if candidates.ndim == 2 else candidates[first], lam[rows, first]


def locate(ico: Icosphere, p):
    """Find the face containing each point and its barycentric coordinates.

    Coordinates are those of the radial (gnomonic) projection of ``p`` onto
    the plane of the face, so ``normalize(bary @ face_vertices) == p``.
    Returns ``(face_index, bary)`` with shapes ``p.shape[:-1]`` and
    ``p.shape[:-1] + (3,)``.
    """
    p = np.asarray(p, dtype=float)
    shape = p.shape[:-1]
    pts = p.reshape(-1, 3)
    norms = np.linalg.norm(pts, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-10):
        warnings.warn("locate(): non-unit query points were normalised", RuntimeWarning, stacklevel=2)
        pts = pts / norms[:, None]

    planes = ico._edge_planes
    faces_out = np.empty(len(pts), dtype=np.int64)
    lam_out = np.empty((len(pts), 3))
    chunk = 1024
    if ico.level <= _BRUTE_FORCE_MAX_LEVEL:
        P = planes[ico.level]
        allf = np.arange(len(P))
        for s in range(0, len(pts), chunk):
            q = pts[s:s + chunk]
            lam = np.einsum("fkd,md->mfk", P, q)
            f, l = _pick(lam, allf)
            faces_out[s:s + chunk] = f
            lam_out[s:s + chunk] = l
    else:
        for s in range(0, len(pts), chunk):
            q = pts[s:s + chunk]
            lam = np.einsum("fkd,md->mfk", planes[0], q)
            f, _ = _pick(lam, np.arange(len(planes[0])))
            for g in range(1, ico.level + 1):
                cand = 4 * f[:, None] + np.arange(4)[None, :]
                lam = np.einsum("mckd,md->mck", planes[g][cand], q)
                f, l = _pick(lam, cand)
            faces_out[s:s + chunk] = f
            lam_out[s:s + chunk] = l

    # coordinates at round-off level are zero: grid vertices map to exact unit vectors
    lam_out[lam_out < _ROUNDOFF] = 0.0
    lam_out /= lam_out.sum(axis=1, keepdims=True)
    return faces_out.reshape(shape), lam_out.reshape(shape + (3,))
