"""Gradient-descent registration of connectivity functions.

The cost ``H = ||q1 - (q2 * gamma)||^2`` is decreased by composing small
warps ``exp_id(-sigma grad H)``, where ``grad H`` is expanded in an
orthonormal tangent basis at the identity.  All directional derivatives
for a basis are computed in one pass from two node-wise reductions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import density as dens
from . import geometry as geo
from .basis import harmonic_tangent_basis, sine_basis
from .density import DensityField, HalfDensity, SphereWarp, Warp1D
from .errors import DiffeomorphismError, ValidationError

log = logging.getLogger(__name__)

_DEFAULTS = {
    "interval": dict(step_size=8.0, tolerance=1e-4, basis_size=30, precondition=4.0),
    "sphere": dict(step_size=1.0, tolerance=1e-3, basis_size=6, precondition=0.0),
    "dual_sphere": dict(step_size=1.0, tolerance=1e-3, basis_size=6, precondition=0.0),
}


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for :func:`register_pair`.

    ``None`` entries take per-domain defaults (see :meth:`resolve`).
    ``basis_size`` is the number of sine functions on [0, 1] and the
    maximum harmonic degree on the sphere.

    ``precondition`` damps the step direction: the coefficient of a basis
    element of frequency ``k`` (sine index or harmonic degree) is scaled by
    ``k ** -precondition``.  0 gives the plain gradient.  The stopping test
    always uses the norm of the unscaled gradient.

    With ``adaptive_step`` each line search starts from twice the last
    accepted step (capped at ``step_size``) instead of ``step_size``.
    """

    step_size: float | None = None
    tolerance: float | None = None
    basis_size: int | None = None
    precondition: float | None = None
    adaptive_step: bool = True
    max_iterations: int = 200
    jacobian_step: float = dens.JACOBIAN_STEP
    spatial_step: float = dens.SPATIAL_STEP
    spatial_scheme: str = "central"
    divergence: str = "discrete"
    step_decay: float = 0.5
    max_backoffs: int = 20
    renormalize: bool = True
    multires: bool = False
    interp_mode: str = "chordal"

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValidationError("step_size must be positive")
        if self.tolerance is not None and self.tolerance <= 0:
            raise ValidationError("tolerance must be positive")
        if self.precondition is not None and self.precondition < 0:
            raise ValidationError("precondition must be non-negative")
        if not 0 < self.step_decay < 1:
            raise ValidationError("step_decay must lie in (0, 1)")

    def resolve(self, kind: str, n_grid: int | None = None) -> "RegistrationConfig":
        """Fill unset knobs; on a coarse [0, 1] grid the default basis stops at Nyquist."""
        d = dict(_DEFAULTS[kind])
        if kind == "interval" and n_grid is not None:
            d["basis_size"] = min(d["basis_size"], n_grid // 2)
        return replace(self, **{k: v for k, v in d.items() if getattr(self, k) is None})


@dataclass
class RegistrationResult:
    warp: object
    cost_trace: list = field(default_factory=list)
    gradient_norm_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    norm_drift_trace: list = field(default_factory=list)
    step_trace: list = field(default_factory=list)
    aligned: HalfDensity | None = None

    def diagnostics(self) -> dict:
        return {
            "cost_trace": [float(c) for c in self.cost_trace],
            "gradient_norm_trace": [float(g) for g in self.gradient_norm_trace],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "norm_drift_trace": [float(d) for d in self.norm_drift_trace],
            "step_trace": [float(d) for d in self.step_trace],
        }


@dataclass(frozen=True, eq=False)
class TangentField:
    """Element of the tangent space at the identity warp.

    On [0, 1]: ``values`` and ``slope`` are node arrays.  On the sphere:
    ``values`` is (V, 3) and ``divergence`` is (V,).
    """

    values: np.ndarray
    slope: np.ndarray | None = None
    divergence: np.ndarray | None = None
    coef: np.ndarray | None = None


def _grid_size(domain):
    return domain.grid.n if domain.kind == "interval" else None


def make_basis(domain, cfg: RegistrationConfig):
    cfg = cfg.resolve(domain.kind, _grid_size(domain))
    if domain.kind == "interval":
        return sine_basis(domain.grid, cfg.basis_size)
    return harmonic_tangent_basis(domain.ico, cfg.basis_size)


def basis_field(basis, i) -> TangentField:
    """The ``i``-th basis element as a :class:`TangentField`."""
    e = basis[i]
    if hasattr(e, "derivative"):
        return TangentField(e.values, slope=e.derivative)
    return TangentField(e.field, divergence=e.divergence)


def assemble(basis, coef) -> TangentField:
    coef = np.asarray(coef, dtype=float)
    a, b = basis.assemble(coef)
    if hasattr(basis, "derivatives"):
        return TangentField(a, slope=b, coef=coef)
    return TangentField(a, divergence=b, coef=coef)


# ---------------------------------------------------------------------------
# Differentials of the action and of the cost
# ---------------------------------------------------------------------------

def dphi_1d(q: HalfDensity, b) -> np.ndarray:
    """Differential of ``gamma -> q * gamma`` at the identity along ``b``.

    ``dq/dx b(x) + dq/dy b(y) + q/2 (b'(x) + b'(y))`` on the node grid.
    """
    vals, slope = (b.values, b.derivative) if hasattr(b, "derivative") else (b.values, b.slope)
    dqx = dens.partial_x_1d(q)
    out = dqx * vals[:, None]
    out = out + out.T
    return out + 0.5 * q.values * (slope[:, None] + slope[None, :])


def _frame_coords(ico, field_values):
    w1, w2 = ico.frames
    return np.sum(field_values * w1, axis=-1), np.sum(field_values * w2, axis=-1)


def dphi_sphere(q: HalfDensity, b, eps=dens.SPATIAL_STEP, hemisphere=None,
                scheme="central", divergence="discrete", delta=dens.JACOBIAN_STEP) -> np.ndarray:
    """Differential of the sphere action at the identity along the field ``b``.

    Spatial term from geodesic differences in the vertex frames plus
    ``q/2 (div b(x) + div b(y))``.  ``divergence="discrete"`` uses the
    divergence implied by the mesh Jacobian scheme (so the result is the
    derivative of the discretised action); ``"analytic"`` uses ``b``'s own.  On a two-sphere domain ``b`` acts on
    ``hemisphere`` (0 or 1) only and is zero on the other one, which gives
    the reduced cross-hemisphere blocks and a vanishing opposite block.
    """
    if hasattr(b, "field"):
        fv, div = b.field, b.divergence
    else:
        fv, div = b.values, b.divergence
    ico = q.domain.ico
    if divergence == "discrete":
        div = dens.discrete_divergence(ico, fv, delta)
    a1, a2 = _frame_coords(ico, fv)
    if q.domain.kind == "dual_sphere":
        z = np.zeros(ico.n_vertices)
        h = 0 if hemisphere is None else hemisphere
        ext = (lambda u: np.concatenate([u, z])) if h == 0 else (lambda u: np.concatenate([z, u]))
        a1, a2, div = ext(a1), ext(a2), ext(div)
    D1, D2 = dens.frame_derivatives(q, eps, scheme)
    out = D1 * a1[:, None] + D2 * a2[:, None]
    out = out + out.T
    return out + 0.5 * q.values * (div[:, None] + div[None, :])


def directional_derivative(q1: HalfDensity, q2: HalfDensity, dphi_b) -> float:
    """``-2 <q1 - q2, dPhi(b)>``."""
    dens._check_same(q1, q2)
    return -2.0 * dens.quad_inner(q1.domain, q1.values - q2.values, dphi_b)


def gradient_coefficients(q1: HalfDensity, q2: HalfDensity, basis,
                          eps=dens.SPATIAL_STEP, hemisphere=None, scheme="central",
                          divergence="discrete", delta=dens.JACOBIAN_STEP,
                          partial_x=None, project=False) -> np.ndarray:
    """Directional derivatives of the cost along every basis element.

    Uses symmetry of ``q1 - q2`` to reduce the double integral of each
    ``dPhi(b_i)`` to a single sum over nodes.  On [0, 1] ``partial_x`` may
    supply ``dq2/dx`` (see :func:`density.warped_partial_x_1d`); by default
    it is the slope of ``q2``'s own interpolant.

    ``project=True`` differentiates the renormalised action instead, which
    removes the component of ``dPhi(b_i)`` along ``q2`` (``q2`` is assumed
    to have unit norm).
    """
    dens._check_same(q1, q2)
    dom = q1.domain
    w = dom.weights
    D = q1.values - q2.values

    if dom.kind == "interval":
        dqx = dens.partial_x_1d(q2) if partial_x is None else partial_x

        def pair(M):
            # <M, dPhi(b_i)> for symmetric M
            s = (M * q2.values) @ w
            r = (M * dqx) @ w
            return 2.0 * basis.values @ (w * r) + basis.derivatives @ (w * s)
    else:
        D1, D2 = dens.frame_derivatives(q2, eps, scheme)
        fc = basis.frame_coords
        div = basis.divergences(divergence, delta)
        sl = slice(None)
        ww = w
        if dom.kind == "dual_sphere":
            V = dom.ico.n_vertices
            sl = slice(0, V) if (hemisphere or 0) == 0 else slice(V, 2 * V)
            ww = w[sl]

        def pair(M):
            s = ((M * q2.values) @ w)[sl]
            r1 = ((M * D1) @ w)[sl]
            r2 = ((M * D2) @ w)[sl]
            return 2.0 * (fc[..., 0] @ (ww * r1) + fc[..., 1] @ (ww * r2)) + div @ (ww * s)

    coef = -2.0 * pair(D)
    if project:
        coef += 2.0 * dens.quad_inner(dom, D, q2.values) * pair(q2.values)
    return coef


def gradient_H(q1: HalfDensity, q2: HalfDensity, basis, **kw) -> TangentField:
    """Gradient of the cost as a tangent field, ``sum_i (grad_{b_i} H) b_i``.

    Keyword arguments are passed to :func:`gradient_coefficients`.
    """
    coef = gradient_coefficients(q1, q2, basis, **kw)
    return assemble(basis, coef)


# ---------------------------------------------------------------------------
# Warp algebra
# ---------------------------------------------------------------------------

def incremental_warp(g: TangentField, sigma: float, grid_or_ico, delta=dens.JACOBIAN_STEP):
    """``exp_id(sigma g)``: ``x + sigma g(x)`` on [0, 1], ``exp_v(sigma g(v))`` on S^2.

    Raises :class:`DiffeomorphismError` if the step is too large to give a
    diffeomorphism; callers shrink ``sigma`` and retry.
    """
    if isinstance(grid_or_ico, geo.Grid1D):
        grid = grid_or_ico
        slope = 1.0 + sigma * g.slope
        vals = grid.points + sigma * g.values
        vals[0], vals[-1] = 0.0, 1.0
        if np.any(slope <= 0) or np.any(np.diff(vals) <= 0):
            raise DiffeomorphismError("incremental warp is not monotone",
                                      nodes=np.flatnonzero(slope <= 0))
        return Warp1D(grid, vals, slope)
    ico = grid_or_ico
    targets = geo.sphere_exp(ico.vertices, sigma * g.values)
    warp = SphereWarp(ico, targets)
    return replace(warp, jacobians=dens.jacobian_dets(warp, delta))


def compose_warps(total, inc, mode="chordal", delta=dens.JACOBIAN_STEP):
    """``total o inc``: first apply ``inc``, then ``total``."""
    if isinstance(total, tuple):
        return tuple(compose_warps(a, b, mode, delta) for a, b in zip(total, inc))
    if isinstance(total, Warp1D):
        x = inc.values
        vals = total(x)
        vals[0], vals[-1] = 0.0, 1.0
        slope = total.slope_at(x) * inc.derivative
        return Warp1D(total.grid, vals, slope).validate()
    targets = dens.evaluate_sphere_warp(total, inc.targets, mode=mode)
    out = SphereWarp(total.ico, targets)
    return replace(out, jacobians=dens.jacobian_dets(out, delta, mode=mode))


def _pchip_inverse_values(gamma: Warp1D, y):
    # bisection on the monotone cubic: exact inverse of the interpolant
    x = gamma.grid.points
    f = PchipInterpolator(x, gamma.values)
    idx = np.clip(np.searchsorted(gamma.values, y, side="right") - 1, 0, len(x) - 2)
    lo, hi = x[idx].copy(), x[idx + 1].copy()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = f(mid) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def invert_warp(gamma: Warp1D) -> Warp1D:
    """Inverse of a monotone warp, by exact inversion of its monotone cubic interpolant."""
    x = gamma.grid.points
    vals = _pchip_inverse_values(gamma, x)
    vals[0], vals[-1] = 0.0, 1.0
    with np.errstate(divide="ignore"):
        slope = 1.0 / gamma.slope_at(vals)
    return Warp1D(gamma.grid, vals, slope)


def invert_sphere_warp(gamma: SphereWarp, iterations=50, tol=1e-12, mode="chordal") -> SphereWarp:
    """Inverse of a sphere warp at the vertices by fixed-point iteration.

    Solves ``gamma(p) = v`` with ``p <- exp_p(PT(log_{gamma(p)} v))``.
    """
    v = gamma.ico.vertices
    p = geo.sphere_exp(v, -gamma.displacement())
    for _ in range(iterations):
        img = dens.evaluate_sphere_warp(gamma, p, mode=mode)
        err = geo.sphere_log(img, v)
        p = geo.sphere_exp(p, geo.parallel_transport(img, p, err))
        if np.max(np.linalg.norm(err, axis=1)) < tol:
            break
    return SphereWarp(gamma.ico, p)


def identity_warp(domain):
    if domain.kind == "interval":
        return Warp1D.identity(domain.grid)
    if domain.kind == "sphere":
        return SphereWarp.identity(domain.ico)
    return (SphereWarp.identity(domain.ico), SphereWarp.identity(domain.ico))


def warp_distance(gamma, other=None) -> float:
    """L2 distance between two warps (or from the identity).

    On [0, 1] the trapezoid L2 norm of the difference; on the sphere the
    quadrature-weighted RMS geodesic distance between images, normalised
    by the sphere area.
    """
    if isinstance(gamma, tuple):
        o = other if other is not None else (None, None)
        return float(np.sqrt(sum(warp_distance(g, h) ** 2 for g, h in zip(gamma, o))))
    if isinstance(gamma, Warp1D):
        ref = gamma.grid.points if other is None else other.values
        return float(np.sqrt(gamma.grid.weights @ (gamma.values - ref) ** 2))
    ref = gamma.ico.vertices if other is None else other.targets
    d = geo.sphere_distance(gamma.targets, ref)
    w = gamma.ico.vertex_weights
    return float(np.sqrt(w @ d ** 2 / w.sum()))


def apply_warp(q: HalfDensity, gamma, cfg: RegistrationConfig | None = None):
    """``(q * gamma)`` plus the relative norm drift removed by renormalisation."""
    cfg = (cfg or RegistrationConfig()).resolve(q.domain.kind, _grid_size(q.domain))
    if q.domain.kind == "interval":
        vals, drift = dens.action_1d(q, gamma, renormalize=cfg.renormalize)
        return HalfDensity(q.domain, vals), drift
    vals, drift = dens.sphere_action(q, gamma, delta=cfg.jacobian_step, renormalize=cfg.renormalize)
    return HalfDensity(q.domain, vals), drift


# ---------------------------------------------------------------------------
# Descent loops
# ---------------------------------------------------------------------------

def _as_half(f):
    if isinstance(f, HalfDensity):
        return f
    if isinstance(f, DensityField):
        return dens.q_map(f)
    raise TypeError(f"expected a DensityField or HalfDensity, got {type(f).__name__}")


def _grad_kw(cfg):
    return dict(eps=cfg.spatial_step, scheme=cfg.spatial_scheme,
                divergence=cfg.divergence, delta=cfg.jacobian_step, project=cfg.renormalize)


def _step_weights(basis, cfg):
    return basis.frequencies ** -cfg.precondition


def _first_sigma(cfg, last):
    if cfg.adaptive_step and last is not None:
        return min(cfg.step_size, 2.0 * last)
    return cfg.step_size


def _line_search(q1, q2, warp, step, cost, cfg, target, update, sigma):
    """Backtracking on sigma; returns ``(warp, warped, cost, drift, sigma)`` or ``None``."""
    for _ in range(cfg.max_backoffs + 1):
        try:
            inc = incremental_warp(step, sigma, target, delta=cfg.jacobian_step)
            cand = update(warp, inc)
            warped, drift = apply_warp(q2, cand, cfg)
        except DiffeomorphismError:
            sigma *= cfg.step_decay
            continue
        c = dens.alignment_cost(q1, warped)
        if c < cost:
            return cand, warped, c, drift, sigma
        sigma *= cfg.step_decay
    return None


def _descend(q1, q2, cfg, basis, init=None):
    dom = q1.domain
    target = dom.grid if dom.kind == "interval" else dom.ico
    warp = init if init is not None else identity_warp(dom)
    warped, drift = apply_warp(q2, warp, cfg) if init is not None else (q2, 0.0)
    cost = dens.alignment_cost(q1, warped)
    res = RegistrationResult(warp=warp, cost_trace=[cost])
    weights = _step_weights(basis, cfg)
    last = None

    def update(total, inc):
        return compose_warps(total, inc, mode=cfg.interp_mode, delta=cfg.jacobian_step)

    def grad(warp, warped, drift):
        kw = _grad_kw(cfg)
        if dom.kind == "interval":
            scale = 1.0 / (1.0 + drift) if cfg.renormalize else 1.0
            kw["partial_x"] = dens.warped_partial_x_1d(q2, warp, warped, scale)
        return gradient_coefficients(q1, warped, basis, **kw)

    for it in range(cfg.max_iterations):
        coef = grad(warp, warped, drift)
        gnorm = float(np.linalg.norm(coef))
        res.gradient_norm_trace.append(gnorm)
        if gnorm <= cfg.tolerance:
            res.converged = True
            break
        step = assemble(basis, -coef * weights)
        found = _line_search(q1, q2, warp, step, cost, cfg, target, update, _first_sigma(cfg, last))
        if found is None:
            log.info("line search stalled at iteration %d (|grad H| = %.3g)", it, gnorm)
            break
        warp, warped, cost, drift, last = found
        res.cost_trace.append(cost)
        res.norm_drift_trace.append(drift)
        res.step_trace.append(last)
        res.iterations = it + 1
    else:
        coef = grad(warp, warped, drift)
        res.gradient_norm_trace.append(float(np.linalg.norm(coef)))
        res.converged = res.gradient_norm_trace[-1] <= cfg.tolerance

    res.warp = warp
    res.aligned = warped
    return res


def _restrict(q: HalfDensity, ico) -> HalfDensity:
    V = ico.n_vertices
    vals = q.values[:V, :V]
    dom = dens.DomainSpec.sphere(ico)
    out = HalfDensity(dom, vals)
    return HalfDensity(dom, vals / out.norm())


def _register_multires(q1, q2, cfg):
    ico = q1.domain.ico
    levels = [g for g in range(max(ico.level - 2, 1), ico.level)]
    warp = None
    for g in levels:
        coarse = geo.build_icosphere(g)
        c1, c2 = _restrict(q1, coarse), _restrict(q2, coarse)
        if warp is not None:
            warp = SphereWarp(coarse, dens.evaluate_sphere_warp(warp, coarse.vertices, cfg.interp_mode))
            warp = warp.with_jacobians(cfg.jacobian_step)
        basis = harmonic_tangent_basis(coarse, cfg.basis_size)
        warp = _descend(c1, c2, cfg, basis, init=warp).warp
    warp = SphereWarp(ico, dens.evaluate_sphere_warp(warp, ico.vertices, cfg.interp_mode))
    warp = warp.with_jacobians(cfg.jacobian_step)
    return _descend(q1, q2, cfg, harmonic_tangent_basis(ico, cfg.basis_size), init=warp)


def register_pair(f1, f2, cfg: RegistrationConfig | None = None, basis=None, init=None) -> RegistrationResult:
    """Find ``gamma`` minimising ``||q1 - (q2 * gamma)||^2`` on [0, 1] or S^2.

    ``f1``/``f2`` may be densities or half-densities.  The cost trace is
    strictly decreasing; if no step size in the backtracking schedule
    decreases the cost the best iterate is returned with
    ``converged=False``.
    """
    q1, q2 = _as_half(f1), _as_half(f2)
    dens._check_same(q1, q2)
    if q1.domain.kind == "dual_sphere":
        return register_pair_dual(q1, q2, cfg, basis=basis, init=init)
    cfg = (cfg or RegistrationConfig()).resolve(q1.domain.kind, _grid_size(q1.domain))
    if cfg.multires and q1.domain.kind == "sphere" and init is None and q1.domain.ico.level > 1:
        return _register_multires(q1, q2, cfg)
    basis = basis if basis is not None else make_basis(q1.domain, cfg)
    return _descend(q1, q2, cfg, basis, init=init)


def register_pair_dual(f1, f2, cfg: RegistrationConfig | None = None, basis=None, init=None) -> RegistrationResult:
    """Two-hemisphere registration: alternate updates of ``gamma^1`` and ``gamma^2``.

    Each iteration takes a descent step for the first hemisphere's warp
    with the second held fixed, re-warps, then does the same for the
    second.  Stops when both gradient norms are below the tolerance.
    """
    q1, q2 = _as_half(f1), _as_half(f2)
    dens._check_same(q1, q2)
    if q1.domain.kind != "dual_sphere":
        raise ValidationError("register_pair_dual needs a dual_sphere domain")
    cfg = (cfg or RegistrationConfig()).resolve("dual_sphere")
    ico = q1.domain.ico
    basis = basis if basis is not None else harmonic_tangent_basis(ico, cfg.basis_size)
    warp = init if init is not None else identity_warp(q1.domain)
    warped = apply_warp(q2, warp, cfg)[0] if init is not None else q2
    cost = dens.alignment_cost(q1, warped)
    res = RegistrationResult(warp=warp, cost_trace=[cost])
    res.hemisphere_gradient_trace = []
    weights = _step_weights(basis, cfg)
    last = [None, None]

    def updater(h):
        def update(total, inc):
            parts = list(total)
            parts[h] = compose_warps(total[h], inc, mode=cfg.interp_mode, delta=cfg.jacobian_step)
            return tuple(parts)
        return update

    for it in range(cfg.max_iterations):
        norms = []
        moved = False
        for h in (0, 1):
            coef = gradient_coefficients(q1, warped, basis, hemisphere=h, **_grad_kw(cfg))
            gnorm = float(np.linalg.norm(coef))
            norms.append(gnorm)
            if gnorm <= cfg.tolerance:
                continue
            step = assemble(basis, -coef * weights)
            found = _line_search(q1, q2, warp, step, cost, cfg, ico, updater(h),
                                 _first_sigma(cfg, last[h]))
            if found is None:
                continue
            warp, warped, cost, drift, last[h] = found
            res.cost_trace.append(cost)
            res.norm_drift_trace.append(drift)
            res.step_trace.append(last[h])
            moved = True
        res.hemisphere_gradient_trace.append(tuple(norms))
        res.gradient_norm_trace.append(float(np.hypot(*norms)))
        if max(norms) <= cfg.tolerance:
            res.converged = True
            break
        res.iterations = it + 1
        if not moved:
            break
    res.warp = warp
    res.aligned = warped
    return res
