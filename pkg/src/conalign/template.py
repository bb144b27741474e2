"""Population templates: Karcher mean of orbits, orbit centering and the
end-to-end alignment pipeline.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import density as dens
from . import geometry as geo
from .density import DensityField, HalfDensity, SphereWarp, Warp1D
from .errors import DomainError, ValidationError
from .register import (RegistrationConfig, apply_warp, compose_warps, identity_warp,
                       invert_sphere_warp, invert_warp, register_pair)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemplateConfig:
    """Outer-loop settings.

    ``tol`` stops the mean update once ``||mean log||`` falls below it;
    ``step`` is the fraction of the mean log taken per update.
    ``inner_iterations`` caps each warm-started registration inside the mean
    loop (the warps carry over between outer iterations, so a short budget
    per pass loses little); ``None`` uses ``registration.max_iterations``.
    With ``register=False`` the orbits are ignored and the result is the
    plain Karcher mean on the unit sphere.
    """

    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    tol: float = 1e-3
    step: float = 0.3
    max_outer: int = 50
    register: bool = True
    statistic: str = "mean"
    warm_start: bool = True
    threads: int = 1
    inner_iterations: int | None = 50

    def __post_init__(self):
        if self.statistic not in ("mean", "median"):
            raise ValidationError(f"unknown statistic {self.statistic!r}")
        if not 0 < self.step <= 1:
            raise ValidationError("step must lie in (0, 1]")
        if self.inner_iterations is not None and self.inner_iterations < 1:
            raise ValidationError("inner_iterations must be positive")


# ---------------------------------------------------------------------------
# Unit Hilbert sphere
# ---------------------------------------------------------------------------

def hilbert_sphere_exp(mu: HalfDensity, v, t: float = 1.0) -> HalfDensity:
    """``cos(t|v|) mu + sin(t|v|) v/|v|`` for a tangent function ``v`` at ``mu``."""
    v = np.asarray(v, dtype=float)
    nv = np.sqrt(max(dens.quad_inner(mu.domain, v, v), 0.0)) * abs(t)
    if nv < 1e-15:
        return HalfDensity(mu.domain, mu.values.copy())
    out = np.cos(nv) * mu.values + np.sin(nv) * np.sign(t) * v * (abs(t) / nv)
    return HalfDensity(mu.domain, out)


def hilbert_sphere_log(mu: HalfDensity, q: HalfDensity) -> np.ndarray:
    """Tangent function at ``mu`` pointing to ``q`` with length ``d_R(mu, q)``."""
    dens._check_same(mu, q)
    c = np.clip(dens.quad_inner(mu.domain, mu.values, q.values), -1.0, 1.0)
    theta = float(np.arccos(c))
    if theta < 1e-12:
        return np.zeros_like(mu.values)
    # arccos is ill-conditioned near -1, so test the cosine itself
    if 1.0 + c < 1e-12:
        raise DomainError("log map undefined for antipodal half-densities")
    return (theta / np.sin(theta)) * (q.values - c * mu.values)


def _tangent_norm(domain, v):
    return float(np.sqrt(max(dens.quad_inner(domain, v, v), 0.0)))


def _renormalize(q: HalfDensity) -> HalfDensity:
    return HalfDensity(q.domain, q.values / q.norm())


# ---------------------------------------------------------------------------
# Mean of orbits
# ---------------------------------------------------------------------------

@dataclass
class OrbitMean:
    mean: HalfDensity
    update_norms: list
    converged: bool
    warps: list
    aligned: list
    failures: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.update_norms)


def medoid_index(qs) -> int:
    """Index of the input with the smallest summed L2 distance to the others."""
    w = qs[0].domain.weights
    flat = np.stack([(q.values * np.sqrt(np.outer(w, w))).ravel() for q in qs])
    g = flat @ flat.T
    sq = np.diag(g)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * g, 0.0))
    return int(np.argmin(d.sum(axis=1)))


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _align_all(mu, qs, cfg: TemplateConfig, inits):
    """Register every ``q_j`` onto ``mu``; returns warps, aligned values, failures."""
    rcfg = cfg.registration

    def one(j):
        try:
            init = inits[j] if (cfg.warm_start and inits is not None) else None
            r = register_pair(mu, qs[j], rcfg, init=init)
            return r.warp, r.aligned
        except (ValidationError, DomainError, FloatingPointError) as exc:
            log.warning("subject %d failed to register: %s", j, exc)
            return None, exc

    out = _map(one, range(len(qs)), cfg.threads)
    warps = [w for w, _ in out]
    aligned = [a if w is not None else None for w, a in out]
    failures = [j for j, (w, _) in enumerate(out) if w is None]
    return warps, aligned, failures


def karcher_mean_orbits(qs, cfg: TemplateConfig | None = None, init: HalfDensity | None = None) -> OrbitMean:
    """Karcher mean of the orbits ``[q_j]`` under the warping action.

    Each outer iteration aligns every ``q_j`` to the current mean, averages
    the log maps of the aligned functions and moves the mean a fraction
    ``cfg.step`` along that average.
    """
    cfg = cfg or TemplateConfig()
    qs = [q if isinstance(q, HalfDensity) else dens.q_map(q) for q in qs]
    if len(qs) < 2:
        raise ValidationError("need at least two inputs")
    for q in qs[1:]:
        dens._check_same(qs[0], q)
    if cfg.statistic == "median":
        raise NotImplementedError("the median template is not implemented")
    mu = _renormalize(init if init is not None else qs[medoid_index(qs)])
    if cfg.inner_iterations is not None:
        cap = min(cfg.inner_iterations, cfg.registration.max_iterations)
        cfg = replace(cfg, registration=replace(cfg.registration, max_iterations=cap))
    norms = []
    warps = [None] * len(qs)
    aligned = list(qs)
    failures = []
    converged = False
    for k in range(cfg.max_outer):
        if cfg.register:
            warps, aligned, failures = _align_all(mu, qs, cfg, warps)
        ok = [a for a in aligned if a is not None]
        if not ok:
            raise ValidationError("every subject failed to register")
        vbar = np.mean([hilbert_sphere_log(mu, a) for a in ok], axis=0)
        nv = _tangent_norm(mu.domain, vbar)
        norms.append(nv)
        log.info("outer iteration %d: |mean log| = %.3g", k, nv)
        if nv <= cfg.tol:
            converged = True
            break
        mu = _renormalize(hilbert_sphere_exp(mu, vbar, cfg.step))
    return OrbitMean(mu, norms, converged, warps, aligned, failures)


# ---------------------------------------------------------------------------
# Means of warps and centering
# ---------------------------------------------------------------------------

def _sphere_point_mean(points, iterations=50, tol=1e-13):
    """Per-row Karcher mean of ``points`` with shape (n_samples, V, 3)."""
    m = np.sum(points, axis=0)
    m /= np.linalg.norm(m, axis=-1, keepdims=True)
    for _ in range(iterations):
        u = np.mean([geo.sphere_log(m, p) for p in points], axis=0)
        m = geo.sphere_exp(m, u)
        if np.max(np.linalg.norm(u, axis=-1)) < tol:
            break
    return m


def karcher_mean_warps(gammas):
    """Mean warp: node-wise average on [0, 1], per-vertex Karcher mean on the sphere.

    On [0, 1] the flat exp/log at the identity make the Karcher mean the
    pointwise average of the warps (and of their slopes).
    """
    if not gammas:
        raise ValidationError("no warps to average")
    g0 = gammas[0]
    if isinstance(g0, tuple):
        return tuple(karcher_mean_warps([g[h] for g in gammas]) for h in range(len(g0)))
    if isinstance(g0, Warp1D):
        vals = np.mean([g.values for g in gammas], axis=0)
        slope = np.mean([g.derivative for g in gammas], axis=0)
        vals[0], vals[-1] = 0.0, 1.0
        return Warp1D(g0.grid, vals, slope).validate()
    targets = _sphere_point_mean(np.stack([g.targets for g in gammas]))
    return SphereWarp(g0.ico, targets).with_jacobians()


def _invert(gamma):
    if isinstance(gamma, tuple):
        return tuple(_invert(g) for g in gamma)
    if isinstance(gamma, Warp1D):
        return invert_warp(gamma)
    return invert_sphere_warp(gamma).with_jacobians()


@dataclass
class CenterResult:
    center: HalfDensity
    mean_warp: object
    warps: list
    failures: list = field(default_factory=list)


def center_orbit(mu: HalfDensity, qs, cfg: TemplateConfig | None = None, warps=None) -> CenterResult:
    """Move ``mu`` within its orbit so that the warps aligning ``qs`` to it average to the identity."""
    cfg = cfg or TemplateConfig()
    qs = [q if isinstance(q, HalfDensity) else dens.q_map(q) for q in qs]
    warps, _, failures = _align_all(mu, qs, cfg, warps)
    ok = [w for w in warps if w is not None]
    gbar = karcher_mean_warps(ok)
    center, _ = apply_warp(mu, _invert(gbar), cfg.registration)
    return CenterResult(_renormalize(center), gbar, warps, failures)


def center_of_orbit(mu: HalfDensity, qs, cfg: TemplateConfig | None = None, warps=None) -> HalfDensity:
    return center_orbit(mu, qs, cfg, warps).center


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class TemplateResult:
    template: HalfDensity
    warps: list
    aligned: list
    update_norms: list
    converged: bool
    failures: list = field(default_factory=list)
    mean_warp: object = None
    uncentered: HalfDensity | None = None

    def template_density(self) -> DensityField:
        return dens.q_unmap(self.template)

    def diagnostics(self) -> dict:
        return {
            "update_norms": [float(x) for x in self.update_norms],
            "outer_iterations": len(self.update_norms),
            "converged": bool(self.converged),
            "failures": [int(j) for j in self.failures],
        }


def full_pipeline(fs, cfg: TemplateConfig | RegistrationConfig | None = None) -> TemplateResult:
    """Template and per-subject warps for a population of densities.

    Square-root transform, Karcher mean of orbits, centering, and a final
    registration of every subject onto the centered template.  A subject
    whose registration fails gets ``None`` for its warp and aligned density
    and is listed in ``failures``; the others are unaffected.
    """
    if isinstance(cfg, RegistrationConfig):
        cfg = TemplateConfig(registration=cfg)
    cfg = cfg or TemplateConfig()
    if len(fs) < 2:
        raise ValidationError("need at least two inputs")
    qs = [f if isinstance(f, HalfDensity) else dens.q_map(f) for f in fs]
    km = karcher_mean_orbits(qs, cfg)
    if cfg.register:
        cen = center_orbit(km.mean, qs, cfg, km.warps)
        inv = _invert(cen.mean_warp)
        inits = [None if w is None else _compose_safe(w, inv) for w in cen.warps]
        warps, aligned, failures = _align_all(cen.center, qs, cfg, inits)
        template = cen.center
        mean_warp = cen.mean_warp
    else:
        template, mean_warp = km.mean, None
        warps = [identity_warp(q.domain) for q in qs]
        aligned, failures = list(qs), []
    failures = sorted(set(failures) | set(km.failures))
    out_aligned = [None if a is None or j in failures else dens.q_unmap(a)
                   for j, a in enumerate(aligned)]
    out_warps = [None if j in failures else w for j, w in enumerate(warps)]
    return TemplateResult(template, out_warps, out_aligned, km.update_norms, km.converged,
                          failures, mean_warp, km.mean)


def _compose_safe(w, inv):
    try:
        return compose_warps(w, inv)
    except ValidationError:
        return None
