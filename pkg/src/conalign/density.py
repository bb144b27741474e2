"""Connectivity densities, half-densities and the warping group action.

A connectivity function lives on a node grid of the domain (``[0, 1]``, one
sphere, or two spheres) and is stored as a full symmetric node-by-node
matrix.  Integrals use the product of per-node quadrature weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import PchipInterpolator

from . import geometry as geo
from .errors import DiffeomorphismError, ValidationError

log = logging.getLogger(__name__)

JACOBIAN_STEP = 1e-3
SPATIAL_STEP = 1e-3


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Where a connectivity function lives.

    ``kind`` is one of ``"interval"``, ``"sphere"`` or ``"dual_sphere"``.
    For the dual domain both hemispheres share one icosphere; node ``i < V``
    is on the first hemisphere and node ``V + i`` is vertex ``i`` of the
    second.
    """

    kind: str
    grid: geo.Grid1D | None = None
    ico: geo.Icosphere | None = None

    @classmethod
    def interval(cls, grid):
        if isinstance(grid, (int, np.integer)):
            grid = geo.Grid1D(int(grid))
        return cls("interval", grid=grid)

    @classmethod
    def sphere(cls, ico):
        if isinstance(ico, (int, np.integer)):
            ico = geo.build_icosphere(int(ico))
        return cls("sphere", ico=ico)

    @classmethod
    def dual_sphere(cls, ico):
        if isinstance(ico, (int, np.integer)):
            ico = geo.build_icosphere(int(ico))
        return cls("dual_sphere", ico=ico)

    @property
    def n_nodes(self) -> int:
        if self.kind == "interval":
            return self.grid.n
        if self.kind == "sphere":
            return self.ico.n_vertices
        return 2 * self.ico.n_vertices

    @property
    def weights(self) -> np.ndarray:
        if self.kind == "interval":
            return self.grid.weights
        if self.kind == "sphere":
            return self.ico.vertex_weights
        return np.concatenate([self.ico.vertex_weights, self.ico.vertex_weights])

    @property
    def hemisphere(self) -> np.ndarray:
        """Hemisphere label (0 or 1) per node; all zeros off the dual domain."""
        if self.kind == "dual_sphere":
            return np.repeat([0, 1], self.ico.n_vertices)
        return np.zeros(self.n_nodes, dtype=int)

    @property
    def level(self):
        return None if self.ico is None else self.ico.level

    def same_as(self, other) -> bool:
        if self.kind != other.kind:
            return False
        if self.kind == "interval":
            return self.grid.n == other.grid.n
        return self.ico is other.ico or self.ico.level == other.ico.level

    def describe(self) -> str:
        if self.kind == "interval":
            return f"interval(n={self.grid.n})"
        return f"{self.kind}(G={self.ico.level})"


def _check_same(a, b):
    if not a.domain.same_as(b.domain):
        raise ValidationError(
            f"domain mismatch: {a.domain.describe()} vs {b.domain.describe()}")


def quad_inner(domain: DomainSpec, a, b) -> float:
    w = domain.weights
    return float(w @ (np.asarray(a) * np.asarray(b)) @ w)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityField:
    """Symmetric, non-negative node matrix integrating to one."""

    domain: DomainSpec
    values: np.ndarray

    def integral(self) -> float:
        w = self.domain.weights
        return float(w @ self.values @ w)

    def validate(self, tol=1e-6):
        v = self.values
        n = self.domain.n_nodes
        if v.shape != (n, n):
            raise ValidationError(f"expected a {n}x{n} matrix, got {v.shape}")
        if not np.array_equal(v, v.T):
            raise ValidationError("density matrix is not symmetric")
        if np.any(v < 0):
            raise ValidationError("density has negative entries")
        if abs(self.integral() - 1.0) > tol:
            raise ValidationError(f"density integrates to {self.integral():.8g}, not 1")
        return self

    def normalized(self):
        return replace(self, values=self.values / self.integral())


@dataclass(frozen=True, eq=False)
class HalfDensity:
    """Square-root representation ``q`` of a density, unit L2 norm."""

    domain: DomainSpec
    values: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(max(quad_inner(self.domain, self.values, self.values), 0.0)))

    @cached_property
    def x_slopes(self) -> np.ndarray:
        """Monotone-cubic node slopes along the first argument (interval domains)."""
        return pchip_slopes(self.domain.grid.points, self.values)

    def validate(self, tol=1e-6):
        v = self.values
        if not np.array_equal(v, v.T):
            raise ValidationError("half-density matrix is not symmetric")
        if abs(self.norm() - 1.0) > tol:
            raise ValidationError(f"half-density has norm {self.norm():.8g}, not 1")
        return self


def symmetrize(m):
    """Exactly symmetric average of ``m`` and its transpose."""
    return 0.5 * (m + m.T)


def signed_sqrt(s):
    s = np.asarray(s, dtype=float)
    return np.sign(s) * np.sqrt(np.abs(s))


def q_map(f: DensityField) -> HalfDensity:
    """Signed square-root transform of a density."""
    return HalfDensity(f.domain, signed_sqrt(f.values))


def q_unmap(q: HalfDensity) -> DensityField:
    return DensityField(q.domain, q.values * np.abs(q.values))


def riemannian_distance(q1: HalfDensity, q2: HalfDensity) -> float:
    """Great-circle distance between two half-densities on the unit Hilbert sphere."""
    _check_same(q1, q2)
    c = quad_inner(q1.domain, q1.values, q2.values)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def alignment_cost(q1: HalfDensity, q2: HalfDensity) -> float:
    """Squared ambient L2 distance ``||q1 - q2||^2``."""
    _check_same(q1, q2)
    d = q1.values - q2.values
    return quad_inner(q1.domain, d, d)


def region_connectivity(f: DensityField, e1, e2) -> float:
    """Connection mass between two node sets: the double integral of ``f`` over ``e1 x e2``."""
    e1 = np.asarray(e1, dtype=np.int64)
    e2 = np.asarray(e2, dtype=np.int64)
    if e1.size == 0 or e2.size == 0:
        return 0.0
    w = f.domain.weights
    return float(w[e1] @ f.values[np.ix_(e1, e2)] @ w[e2])


# ---------------------------------------------------------------------------
# Warps on [0, 1]
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Warp1D:
    """Boundary-preserving increasing map of [0, 1] sampled on a grid, with its slope."""

    grid: geo.Grid1D
    values: np.ndarray
    derivative: np.ndarray

    @classmethod
    def identity(cls, grid):
        return cls(grid, np.array(grid.points), np.ones(grid.n))

    @classmethod
    def from_values(cls, grid, values):
        """Build a warp from node values; the slope comes from the monotone cubic."""
        values = np.asarray(values, dtype=float)
        slope = PchipInterpolator(grid.points, values).derivative()(grid.points)
        return cls(grid, values, slope)

    def __call__(self, x):
        return PchipInterpolator(self.grid.points, self.values)(np.clip(x, 0.0, 1.0))

    def slope_at(self, x):
        return PchipInterpolator(self.grid.points, self.derivative)(np.clip(x, 0.0, 1.0))

    def validate(self):
        v = self.values
        if v[0] != 0.0 or v[-1] != 1.0:
            raise DiffeomorphismError(
                f"warp must fix the endpoints, got {v[0]!r}, {v[-1]!r}", nodes=[0, len(v) - 1])
        bad = np.flatnonzero(np.diff(v) <= 0)
        if bad.size:
            raise DiffeomorphismError("warp is not strictly increasing", nodes=bad)
        bad = np.flatnonzero(self.derivative <= 0)
        if bad.size:
            raise DiffeomorphismError("warp slope is not positive", nodes=bad)
        return self


def pchip_slopes(x, y):
    """Node slopes of the monotone piecewise cubic through ``(x, y)`` along axis 0.

    Same rule as :class:`scipy.interpolate.PchipInterpolator` (weighted
    harmonic means inside, shape-preserving three-point formula at the
    ends), vectorised over trailing axes without the per-call overhead.
    """
    y = np.asarray(y, dtype=float)
    h = np.diff(x).reshape((-1,) + (1,) * (y.ndim - 1))
    m = np.diff(y, axis=0) / h
    d = np.empty_like(y)
    if len(x) == 2:
        d[:] = m[0]
        return d
    w1 = 2 * h[1:] + h[:-1]
    w2 = h[1:] + 2 * h[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = (w1 + w2) / (w1 / m[:-1] + w2 / m[1:])
    flat = (np.sign(m[1:]) != np.sign(m[:-1])) | (m[1:] == 0) | (m[:-1] == 0)
    d[1:-1] = np.where(flat, 0.0, inner)
    d[0] = _pchip_end(h[0], h[1], m[0], m[1])
    d[-1] = _pchip_end(h[-1], h[-2], m[-1], m[-2])
    return d


def _pchip_end(h0, h1, m0, m1):
    d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    d = np.where(np.sign(d) != np.sign(m0), 0.0, d)
    clip = (np.sign(m0) != np.sign(m1)) & (np.abs(d) > 3 * np.abs(m0))
    return np.where(clip, 3 * m0, d)


def hermite_eval(x, y, d, at):
    """Evaluate the cubic Hermite interpolant with node values ``y`` and slopes ``d`` at ``at`` (axis 0)."""
    at = np.asarray(at, dtype=float)
    k = np.clip(np.searchsorted(x, at, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    t = (at - x[k]) / h
    shape = (-1,) + (1,) * (y.ndim - 1)
    t, h = t.reshape(shape), h.reshape(shape)
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * y[k] + (t3 - 2 * t2 + t) * h * d[k]
            + (3 * t2 - 2 * t3) * y[k + 1] + (t3 - t2) * h * d[k + 1])


def hermite_derivative(x, y, d, at):
    """Derivative of the cubic Hermite interpolant of :func:`hermite_eval`."""
    at = np.asarray(at, dtype=float)
    k = np.clip(np.searchsorted(x, at, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    t = (at - x[k]) / h
    shape = (-1,) + (1,) * (y.ndim - 1)
    t, h = t.reshape(shape), h.reshape(shape)
    t2 = t * t
    return ((6 * t2 - 6 * t) * (y[k] - y[k + 1]) / h + (3 * t2 - 4 * t + 1) * d[k]
            + (3 * t2 - 2 * t) * d[k + 1])


def _pchip_2d(values, x, at, slopes0=None):
    """Evaluate ``values(at_i, at_j)`` by monotone cubic interpolation along each axis."""
    at = np.clip(at, 0.0, 1.0)
    d0 = pchip_slopes(x, values) if slopes0 is None else slopes0
    tmp = hermite_eval(x, values, d0, at).T
    return hermite_eval(x, tmp, pchip_slopes(x, tmp), at).T


def action_1d(q: HalfDensity, gamma: Warp1D, renormalize=True):
    """Apply a warp on [0, 1]; returns ``(values, norm_drift)``.

    ``norm_drift`` is the relative change of the L2 norm from quadrature
    error before renormalisation.  It is second order in the grid spacing
    but grows with the warp's slope at the ends of the interval.
    """
    if q.domain.kind != "interval" or q.domain.grid.n != gamma.grid.n:
        raise ValidationError("warp grid does not match the half-density domain")
    gamma.validate()
    grid = q.domain.grid
    moved = _pchip_2d(q.values, grid.points, gamma.values, q.x_slopes)
    r = np.sqrt(gamma.derivative)
    out = symmetrize(moved * np.outer(r, r))
    n0 = q.norm()
    n1 = float(np.sqrt(quad_inner(q.domain, out, out)))
    drift = n1 / n0 - 1.0 if n0 > 0 else 0.0
    if renormalize and n1 > 0:
        out = out * (n0 / n1)
    return out, drift


def warp_half_density_1d(q: HalfDensity, gamma: Warp1D, renormalize=True) -> HalfDensity:
    """``(q * gamma)(x, y) = q(gamma(x), gamma(y)) sqrt(gamma'(x) gamma'(y))``.

    With ``renormalize`` the output is rescaled to the input norm, which
    removes the quadrature drift (see :func:`action_1d`).
    """
    return HalfDensity(q.domain, action_1d(q, gamma, renormalize)[0])


def warp_density_1d(f: DensityField, gamma: Warp1D, renormalize=True) -> DensityField:
    """``(f * gamma)(x, y) = f(gamma(x), gamma(y)) gamma'(x) gamma'(y)``.

    ``f`` is interpolated through its square root, so this commutes exactly
    with :func:`q_map` and can never produce negative values.
    """
    return q_unmap(warp_half_density_1d(q_map(f), gamma, renormalize))


def partial_x_1d(q: HalfDensity) -> np.ndarray:
    """``dq/dx`` at the nodes: slope of the monotone cubic used by the warp action."""
    return q.x_slopes


def warped_partial_x_1d(q: HalfDensity, gamma: Warp1D, warped: HalfDensity | None = None,
                        scale: float = 1.0) -> np.ndarray:
    """``d/dx (q * gamma)`` at the nodes by the chain rule through ``q`` and ``gamma``.

    Differentiating the grid samples of ``q * gamma`` loses accuracy where
    ``gamma`` compresses features of ``q`` below the grid spacing; this
    form only differentiates the interpolants of ``q`` and of ``gamma``'s
    values and slopes, which stay resolved.  ``warped`` is ``scale`` times
    the raw action (``scale`` undoes renormalisation).
    """
    x = q.domain.grid.points
    at = np.clip(gamma.values, 0.0, 1.0)
    if warped is None:
        warped = HalfDensity(q.domain, scale * action_1d(q, gamma, renormalize=False)[0])
    cols = hermite_eval(x, q.values, q.x_slopes, at).T  # q(x_k, gamma(y_j))
    dq = hermite_derivative(x, cols, pchip_slopes(x, cols), at)
    s = gamma.derivative
    rs = np.sqrt(s)
    dvals = pchip_slopes(x, gamma.values)
    dslope = pchip_slopes(x, s)
    return scale * dq * (dvals * rs)[:, None] * rs[None, :] + warped.values * (0.5 * dslope / s)[:, None]


# ---------------------------------------------------------------------------
# Warps on the sphere
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SphereWarp:
    """Sphere map given by the image of each icosphere vertex.

    Off the grid the map is interpolated face-wise (see :func:`evaluate_sphere_warp`).
    ``jacobians`` caches per-vertex Jacobian determinants when known.
    """

    ico: geo.Icosphere
    targets: np.ndarray
    jacobians: np.ndarray | None = field(default=None)

    @classmethod
    def identity(cls, ico):
        return cls(ico, np.array(ico.vertices), np.ones(ico.n_vertices))

    @classmethod
    def from_rotation(cls, ico, R):
        return cls(ico, ico.vertices @ np.asarray(R).T)

    def with_jacobians(self, delta=JACOBIAN_STEP):
        return replace(self, jacobians=jacobian_dets(self, delta=delta))

    def displacement(self):
        """Tangent displacement ``log_v(gamma(v))`` at every vertex."""
        return geo.sphere_log(self.ico.vertices, self.targets)


def interpolation_matrix(ico, points) -> sp.csr_matrix:
    """Sparse (m, V) matrix of barycentric weights of ``points`` in ``ico``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    faces, bary = geo.locate(ico, points)
    rows = np.repeat(np.arange(len(points)), 3)
    cols = ico.faces[faces].ravel()
    return sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(len(points), ico.n_vertices))


def evaluate_sphere_warp(warp: SphereWarp, points, mode="chordal"):
    """Evaluate a vertex-sampled sphere map at arbitrary points.

    ``mode="chordal"`` blends the vertex images with the barycentric weights
    in R^3 and projects back to the sphere; this reproduces rotations
    exactly.  ``mode="transport"`` treats the map as a field of tangent
    displacements, parallel-transports the three corner displacements to
    the query point, blends them and applies the exponential map there.
    """
    points = np.asarray(points, dtype=float)
    shape = points.shape
    pts = points.reshape(-1, 3)
    faces, bary = geo.locate(warp.ico, pts)
    corners = warp.ico.faces[faces]
    if mode == "chordal":
        out = np.einsum("mk,mkd->md", bary, warp.targets[corners])
        out /= np.linalg.norm(out, axis=1, keepdims=True)
    elif mode == "transport":
        disp = warp.displacement()
        v = warp.ico.vertices
        u = np.zeros_like(pts)
        for k in range(3):
            moved = geo.parallel_transport(v[corners[:, k]], pts, disp[corners[:, k]])
            u += bary[:, k:k + 1] * moved
        out = geo.sphere_exp(pts, u)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return out.reshape(shape)


@lru_cache(maxsize=16)
def _jacobian_stencil(ico, delta):
    """Stencil points ``exp_v(+-delta w_k)`` and their interpolation matrix (4V x V)."""
    v = ico.vertices
    w1, w2 = ico.frames
    pts = np.concatenate([
        geo.sphere_exp(v, delta * w1), geo.sphere_exp(v, -delta * w1),
        geo.sphere_exp(v, delta * w2), geo.sphere_exp(v, -delta * w2)])
    return pts, interpolation_matrix(ico, pts)


def _jacobians_at(warp, idx, delta, mode):
    ico = warp.ico
    V = ico.n_vertices
    if mode == "chordal" and len(idx) == V:
        _, S = _jacobian_stencil(ico, delta)
        img = S @ warp.targets
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        img = img.reshape(4, V, 3)
    else:
        pts, _ = _jacobian_stencil(ico, delta)
        stencil = pts.reshape(4, V, 3)[:, idx]
        img = evaluate_sphere_warp(warp, stencil, mode=mode)
    base = warp.targets[idx]
    logs = geo.sphere_log(base[None], img)
    c1 = (logs[0] - logs[1]) / (2 * delta)
    c2 = (logs[2] - logs[3]) / (2 * delta)
    # oriented area of the image of the unit square, measured in the
    # tangent plane at gamma(v): equals sin(theta~) * det d(theta~, phi~)
    return np.sum(np.cross(c1, c2) * base, axis=-1)


def discrete_divergence(ico, field_values, delta=JACOBIAN_STEP, t=1e-6):
    """Rate of change of the discrete Jacobian of ``exp(t b)`` at ``t = 0``.

    This is the divergence of ``b`` as seen by :func:`jacobian_dets` on this
    mesh; it converges to the analytic divergence at second order in the
    edge length.
    """
    v = ico.vertices
    plus = SphereWarp(ico, geo.sphere_exp(v, t * field_values))
    minus = SphereWarp(ico, geo.sphere_exp(v, -t * field_values))
    return (jacobian_dets(plus, delta, check=False) - jacobian_dets(minus, delta, check=False)) / (2 * t)


def jacobian_dets(warp: SphereWarp, delta=JACOBIAN_STEP, mode="chordal", check=True):
    """Jacobian determinant of a sphere warp at every vertex.

    Central differences of step ``delta`` along geodesics in the orthonormal
    frame at each vertex; the image differences are read off in normal
    coordinates at the image point.
    """
    idx = np.arange(warp.ico.n_vertices)
    jac = _jacobians_at(warp, idx, delta, mode)
    if check:
        bad = np.flatnonzero(jac <= 0)
        if bad.size:
            raise DiffeomorphismError(
                f"sphere warp folds at {bad.size} vertices", nodes=bad)
    return jac


def jacobian_det(warp: SphereWarp, vertex: int, delta=JACOBIAN_STEP, mode="chordal") -> float:
    jac = float(_jacobians_at(warp, np.array([vertex]), delta, mode)[0])
    if jac <= 0:
        raise DiffeomorphismError(f"sphere warp folds at vertex {vertex}", nodes=[vertex])
    return jac


def _sphere_parts(q_domain, gamma, delta):
    """Interpolation operator and Jacobian vector for a sphere or dual-sphere warp."""
    if q_domain.kind == "sphere":
        if isinstance(gamma, tuple):
            raise ValidationError("single-sphere domain takes one SphereWarp")
        jac = gamma.jacobians if gamma.jacobians is not None else jacobian_dets(gamma, delta)
        return interpolation_matrix(gamma.ico, gamma.targets), jac
    if q_domain.kind == "dual_sphere":
        if not isinstance(gamma, tuple) or len(gamma) != 2:
            raise ValidationError("two-sphere domain takes a (SphereWarp, SphereWarp) pair")
        g1, g2 = gamma
        j1 = g1.jacobians if g1.jacobians is not None else jacobian_dets(g1, delta)
        j2 = g2.jacobians if g2.jacobians is not None else jacobian_dets(g2, delta)
        W = sp.block_diag([interpolation_matrix(g1.ico, g1.targets),
                           interpolation_matrix(g2.ico, g2.targets)], format="csr")
        return W, np.concatenate([j1, j2])
    raise ValidationError(f"sphere warp applied to a {q_domain.kind} domain")


def sphere_action(q: HalfDensity, gamma, delta=JACOBIAN_STEP, renormalize=True):
    """Apply a sphere (or hemisphere pair) warp; returns ``(values, norm_drift)``.

    ``norm_drift`` is the relative change of the L2 norm caused by
    discretisation before any renormalisation.
    """
    W, jac = _sphere_parts(q.domain, gamma, delta)
    moved = W @ (W @ q.values).T
    r = np.sqrt(jac)
    out = symmetrize(moved * np.outer(r, r))
    n0 = q.norm()
    n1 = float(np.sqrt(quad_inner(q.domain, out, out)))
    drift = n1 / n0 - 1.0 if n0 > 0 else 0.0
    if renormalize and n1 > 0:
        out = out * (n0 / n1)
    return out, drift


def warp_half_density_sphere(q: HalfDensity, gamma, delta=JACOBIAN_STEP, renormalize=True) -> HalfDensity:
    """``(q * gamma)(x, y) = q(gamma(x), gamma(y)) sqrt(|J(x)| |J(y)|)`` on S^2 or S^2 u S^2.

    For a hemisphere pair ``(g1, g2)`` each node is moved by the warp of its
    own hemisphere, which yields the four block cases of the two-sphere
    action.  With ``renormalize`` the output is rescaled to the input norm.
    """
    values, drift = sphere_action(q, gamma, delta=delta, renormalize=renormalize)
    if abs(drift) > 1e-6:
        log.debug("sphere warp changed the half-density norm by %.3g", drift)
    return HalfDensity(q.domain, values)


def warp_density_sphere(f: DensityField, gamma, delta=JACOBIAN_STEP, renormalize=True) -> DensityField:
    return q_unmap(warp_half_density_sphere(q_map(f), gamma, delta=delta, renormalize=renormalize))


def warp_half_density(q: HalfDensity, gamma, **kw) -> HalfDensity:
    """Dispatch the group action on the domain kind."""
    if q.domain.kind == "interval":
        return warp_half_density_1d(q, gamma, kw.get("renormalize", True))
    return warp_half_density_sphere(q, gamma, **kw)


def warp_density(f: DensityField, gamma, **kw) -> DensityField:
    return q_unmap(warp_half_density(q_map(f), gamma, **kw))


# ---------------------------------------------------------------------------
# Bivariate interpolation and spatial derivatives on the sphere
# ---------------------------------------------------------------------------

def interpolate_bivariate(q: HalfDensity, x, y, hx=0, hy=0):
    """Two-stage barycentric interpolation ``A_yy^T B A_xx`` of ``q`` at ``(x, y)``.

    ``x`` and ``y`` are points (or stacks of points); ``hx``/``hy`` select
    the hemisphere on a dual-sphere domain.
    """
    ico = q.domain.ico
    V = ico.n_vertices
    fx, ax = geo.locate(ico, x)
    fy, ay = geo.locate(ico, y)
    ix = ico.faces[fx] + hx * V
    iy = ico.faces[fy] + hy * V
    B = q.values[ix[..., :, None], iy[..., None, :]]
    T = ax[..., :, None] * ay[..., None, :] * B
    # pairing T[a, b] with T[b, a] makes (x, y) and (y, x) agree bit for bit
    diag = T[..., 0, 0] + T[..., 1, 1] + T[..., 2, 2]
    off = (T[..., 0, 1] + T[..., 1, 0]) + (T[..., 0, 2] + T[..., 2, 0]) + (T[..., 1, 2] + T[..., 2, 1])
    return diag + off


def spatial_derivative(q: HalfDensity, x, y, bx, by, eps=SPATIAL_STEP, hx=0, hy=0, scheme="forward"):
    """Derivative of ``q`` at ``(x, y)`` along the tangent pair ``(bx, by)``.

    Differences of step ``eps`` along geodesics in the orthonormal frames at
    ``x`` and ``y`` (one-sided for ``scheme="forward"``, symmetric for
    ``"central"``), combined with the frame coordinates of ``bx`` and ``by``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if scheme not in ("forward", "central"):
        raise ValueError(f"unknown difference scheme {scheme!r}")

    def diff(at_x, w):
        if at_x:
            plus = interpolate_bivariate(q, geo.sphere_exp(x, eps * w), y, hx, hy)
            minus = (interpolate_bivariate(q, geo.sphere_exp(x, -eps * w), y, hx, hy)
                     if scheme == "central" else base)
        else:
            plus = interpolate_bivariate(q, x, geo.sphere_exp(y, eps * w), hx, hy)
            minus = (interpolate_bivariate(q, x, geo.sphere_exp(y, -eps * w), hx, hy)
                     if scheme == "central" else base)
        return (plus - minus) / (eps * (2 if scheme == "central" else 1))

    base = interpolate_bivariate(q, x, y, hx, hy)
    total = 0.0
    for w in geo.tangent_frame(x):
        total = total + np.sum(np.asarray(bx) * w, axis=-1) * diff(True, w)
    for w in geo.tangent_frame(y):
        total = total + np.sum(np.asarray(by) * w, axis=-1) * diff(False, w)
    return total


@lru_cache(maxsize=16)
def shift_operators(ico, eps=SPATIAL_STEP):
    """Interpolation matrices for the points ``exp_v(eps w_k(v))``, k = 1, 2."""
    v = ico.vertices
    return tuple(interpolation_matrix(ico, geo.sphere_exp(v, eps * w)) for w in ico.frames)


def frame_derivatives(q: HalfDensity, eps=SPATIAL_STEP, scheme="forward"):
    """Grid matrices ``D_k[i, j] = dq_x(w_k(v_i), v_j)`` for k = 1, 2.

    The derivative in the second argument follows by symmetry:
    ``dq_y(v_i, w_k(v_j)) = D_k[j, i]``.
    """
    ico = q.domain.ico
    dual = q.domain.kind == "dual_sphere"

    def lift(E):
        return sp.block_diag([E, E], format="csr") if dual else E

    plus = shift_operators(ico, eps)
    if scheme == "forward":
        return [(lift(E) @ q.values - q.values) / eps for E in plus]
    if scheme == "central":
        minus = shift_operators(ico, -eps)
        return [(lift(Ep) @ q.values - lift(Em) @ q.values) / (2 * eps)
                for Ep, Em in zip(plus, minus)]
    raise ValueError(f"unknown difference scheme {scheme!r}")
