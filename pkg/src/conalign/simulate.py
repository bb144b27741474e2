"""Simulation harness: random warps, endpoint point processes, kernel density
estimates and the population recovery experiment.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator

from . import geometry as geo
from .density import DensityField, DomainSpec, Warp1D, warp_density_1d
from .errors import DiffeomorphismError, ValidationError

log = logging.getLogger(__name__)

# Slopes are drawn as U**SLOPE_POWER with U ~ Uniform(0, 1).  With power 1 the
# warps stay very close to the identity (mean L2 distance ~0.07 for 10 knots);
# a power > 1 gives the heavier-tailed slope distribution needed for warps of
# typical size 0.2-0.25.
DEFAULT_KNOTS = 4
DEFAULT_SLOPE_POWER = 3.0
_KDE_CHUNK = 20000


@dataclass(frozen=True)
class EndpointComponent:
    n: int
    mu1: float
    mu2: float
    var: float

    def __post_init__(self):
        if self.n <= 0:
            raise ValidationError("component pair count must be positive")
        if not (0 <= self.mu1 <= 1 and 0 <= self.mu2 <= 1):
            raise ValidationError("component means must lie in [0, 1]")
        if self.var <= 0:
            raise ValidationError("component variance must be positive")


@dataclass(frozen=True)
class EndpointParams:
    components: tuple
    n_parcels: int = 200

    @property
    def total_pairs(self) -> int:
        return sum(c.n for c in self.components)

    @classmethod
    def from_list(cls, rows, n_parcels=200):
        return cls(tuple(EndpointComponent(int(r[0]), *map(float, r[1:])) for r in rows), n_parcels)

    def to_list(self):
        return [[c.n, c.mu1, c.mu2, c.var] for c in self.components]


DEFAULT_ENDPOINTS = EndpointParams.from_list([
    (2500, 0.1, 0.9, 0.5),
    (2500, 0.1, 0.3, 0.5),
    (2500, 0.5, 0.6, 0.4),
    (2500, 0.2, 0.6, 0.2),
    (8000, 0.55, 0.95, 0.3),
    (2000, 0.4, 0.8, 0.6),
])


@dataclass(frozen=True, eq=False)
class EndpointSet:
    pairs: np.ndarray

    def __post_init__(self):
        p = self.pairs
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValidationError("endpoint pairs must be an (N, 2) array")
        if np.any(p < 0) or np.any(p > 1):
            raise ValidationError("endpoint coordinates must lie in [0, 1]")

    @property
    def count(self) -> int:
        return len(self.pairs)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_warp_1d(K: int = DEFAULT_KNOTS, seed=None, grid: geo.Grid1D | None = None,
                     slope_power: float = DEFAULT_SLOPE_POWER) -> Warp1D:
    """Random warp from normalised cumulative sums of ``K`` random slopes.

    Knot values ``0, S_1/S_K, ..., 1`` at ``k/K`` are interpolated to the
    grid by a monotone cubic.
    """
    if K < 3:
        raise ValidationError("need at least 3 knots")
    grid = grid or geo.Grid1D(200)
    rng = _rng(seed)
    knots = np.linspace(0.0, 1.0, K + 1)
    while True:
        slopes = rng.uniform(0.0, 1.0, K) ** slope_power
        if slopes.min() <= 1e-12:
            continue
        vals = np.concatenate([[0.0], np.cumsum(slopes) / slopes.sum()])
        vals[-1] = 1.0
        d = PchipInterpolator(knots, vals).derivative()(knots)
        # the three-point end formula can return 0; the end secant keeps the cubic monotone
        sec = np.diff(vals) * K
        if d[0] <= 0:
            d[0] = sec[0]
        if d[-1] <= 0:
            d[-1] = sec[-1]
        f = CubicHermiteSpline(knots, vals, d)
        out = f(grid.points)
        out[0], out[-1] = 0.0, 1.0
        warp = Warp1D(grid, out, f.derivative()(grid.points))
        try:
            return warp.validate()
        except DiffeomorphismError:
            # a nearly flat segment underflows on the grid; redraw
            continue


def _truncated_normal(rng, mu, sd, n):
    out = np.empty(0)
    while out.size < n:
        draw = rng.normal(mu, sd, 2 * (n - out.size) + 16)
        out = np.concatenate([out, draw[(draw >= 0) & (draw <= 1)]])
    return out[:n]


def simulate_endpoints(params: EndpointParams = DEFAULT_ENDPOINTS, seed=None) -> EndpointSet:
    """Endpoint pairs from a mixture of truncated bivariate normals (rejection sampling)."""
    rng = _rng(seed)
    blocks = []
    for c in params.components:
        sd = np.sqrt(c.var)
        blocks.append(np.column_stack([_truncated_normal(rng, c.mu1, sd, c.n),
                                       _truncated_normal(rng, c.mu2, sd, c.n)]))
    return EndpointSet(np.concatenate(blocks))


def default_bandwidth(pts: EndpointSet) -> float:
    """Normal-reference bandwidth for a 2-d product kernel on the symmetrised sample."""
    both = pts.pairs.ravel()
    return float(np.std(both) * pts.count ** (-1.0 / 6.0))


def estimate_density(pts: EndpointSet, grid: geo.Grid1D, bandwidth: float | None = None) -> DensityField:
    """Symmetrised Gaussian kernel density estimate on ``grid x grid``, unit integral."""
    if pts.count == 0:
        raise ValidationError("no endpoint pairs")
    h = default_bandwidth(pts) if bandwidth is None else bandwidth
    if not h > 0:
        raise ValidationError("bandwidth must be positive")
    x = grid.points
    m = np.zeros((grid.n, grid.n))
    # chunked so the kernel matrices stay small for large samples
    for start in range(0, pts.count, _KDE_CHUNK):
        block = pts.pairs[start:start + _KDE_CHUNK]
        ku = np.exp(-0.5 * ((x[:, None] - block[None, :, 0]) / h) ** 2)
        kv = np.exp(-0.5 * ((x[:, None] - block[None, :, 1]) / h) ** 2)
        m += ku @ kv.T
    m = 0.5 * (m + m.T)
    dom = DomainSpec.interval(grid)
    w = grid.weights
    return DensityField(dom, m / (w @ m @ w))


def l2_warp_error(gamma: Warp1D, gamma_hat: Warp1D | None = None) -> float:
    """``(int_0^1 |gamma - gamma_hat|^2)^(1/2)`` by the trapezoid rule (identity if omitted)."""
    ref = gamma.grid.points if gamma_hat is None else gamma_hat.values
    if gamma_hat is not None and gamma_hat.grid.n != gamma.grid.n:
        raise ValidationError("warps live on different grids")
    return float(np.sqrt(gamma.grid.weights @ (gamma.values - ref) ** 2))


@dataclass
class Table1Result:
    n: int
    recovery_errors: np.ndarray  # row A per subject
    warp_sizes: np.ndarray  # row B per subject
    failed: list = field(default_factory=list)
    densities: list = field(default_factory=list, repr=False)
    warps: list = field(default_factory=list, repr=False)
    pipeline: object = field(default=None, repr=False)

    def summary(self) -> dict:
        a, b = self.recovery_errors, self.warp_sizes
        return {
            "N": self.n,
            "A_mean": float(np.mean(a)), "A_sd": float(np.std(a, ddof=1)) if len(a) > 1 else 0.0,
            "B_mean": float(np.mean(b)), "B_sd": float(np.std(b, ddof=1)) if len(b) > 1 else 0.0,
            "failed": list(self.failed),
        }


def simulate_population(N: int, seed=None, grid=None, params=DEFAULT_ENDPOINTS,
                        K=DEFAULT_KNOTS, slope_power=DEFAULT_SLOPE_POWER, bandwidth=None):
    """``N`` warped density estimates and the warps that produced them.

    Subject ``j`` gets its own endpoint sample (stream ``2j``) and warp
    (stream ``2j + 1``) derived from the master seed.
    """
    grid = grid or geo.Grid1D(params.n_parcels)
    streams = np.random.SeedSequence(seed).spawn(2 * N)
    dens_, warps = [], []
    for j in range(N):
        f = estimate_density(simulate_endpoints(params, np.random.default_rng(streams[2 * j])),
                             grid, bandwidth)
        g = simulate_warp_1d(K, np.random.default_rng(streams[2 * j + 1]), grid, slope_power)
        dens_.append(warp_density_1d(f, g))
        warps.append(g)
    return dens_, warps


def run_table1_experiment(N: int, cfg=None, seed=None, **sim_kw) -> Table1Result:
    """Warp-recovery experiment on a simulated population of size ``N``.

    Row A compares each simulated warp with the inverse of the warp the
    template pipeline estimates for that subject; row B is the size of the
    simulated warp itself.
    """
    from .register import invert_warp
    from .template import full_pipeline

    if N < 2:
        raise ValidationError("need at least two subjects")
    densities, warps = simulate_population(N, seed, **sim_kw)
    res = full_pipeline(densities, cfg)
    a, b, failed = [], [], []
    for j, g in enumerate(warps):
        est = res.warps[j]
        if est is None:
            failed.append(j)
            continue
        a.append(l2_warp_error(g, invert_warp(est)))
        b.append(l2_warp_error(g))
    return Table1Result(N, np.array(a), np.array(b), failed + list(res.failures),
                        densities, warps, res)


# ---------------------------------------------------------------------------
# Sphere harness
# ---------------------------------------------------------------------------

def vmf_pair_density(domain: DomainSpec, components, rng=None) -> DensityField:
    """Mixture of products of von Mises-Fisher bumps, symmetrised, on a sphere domain.

    ``components`` is a list of ``(weight, mu1, mu2, kappa)`` with unit
    vectors ``mu1``/``mu2``.  On a two-sphere domain each ``mu`` may be a
    ``(hemisphere, vector)`` pair.
    """
    v = domain.ico.vertices
    V = len(v)
    n = domain.n_nodes
    m = np.zeros((n, n))

    def bump(mu, kappa):
        h, mu = mu if isinstance(mu, tuple) else (0, mu)
        mu = np.asarray(mu, float) / np.linalg.norm(mu)
        out = np.zeros(n)
        out[h * V:(h + 1) * V] = np.exp(kappa * (v @ mu - 1.0))
        return out

    for wt, mu1, mu2, kappa in components:
        m += wt * np.outer(bump(mu1, kappa), bump(mu2, kappa))
    m = 0.5 * (m + m.T)
    w = domain.weights
    return DensityField(domain, m / (w @ m @ w))


def random_vmf_components(rng, k=3, kappa=(4.0, 10.0), hemispheres=1):
    rng = _rng(rng)
    out = []
    for _ in range(k):
        mus = rng.standard_normal((2, 3))
        mus /= np.linalg.norm(mus, axis=1, keepdims=True)
        h = rng.integers(0, hemispheres, 2)
        mu1 = (int(h[0]), mus[0]) if hemispheres > 1 else mus[0]
        mu2 = (int(h[1]), mus[1]) if hemispheres > 1 else mus[1]
        out.append((rng.uniform(0.5, 1.5), mu1, mu2, rng.uniform(*kappa)))
    return out


def simulate_sphere_warp(ico: geo.Icosphere, seed=None, scale=0.2, L=4):
    """Smooth random sphere warp ``exp(scale * b)`` with ``b`` a random unit combination of harmonic fields."""
    from .basis import harmonic_tangent_basis
    from .density import SphereWarp

    rng = _rng(seed)
    basis = harmonic_tangent_basis(ico, L)
    c = rng.standard_normal(len(basis))
    c /= np.linalg.norm(c)
    field_ = basis.assemble(c)[0]
    w = SphereWarp(ico, geo.sphere_exp(ico.vertices, scale * field_))
    return w.with_jacobians()


def simulate_sphere_population(N: int, domain: DomainSpec, seed=None, scale=0.2, L=4, k=3):
    """``N`` warped copies of one random von Mises-Fisher mixture on a sphere domain.

    Each subject's warp is drawn by :func:`simulate_sphere_warp` (one per
    hemisphere on a two-sphere domain).
    """
    from .density import warp_density_sphere

    ss = np.random.SeedSequence(seed)
    base_rng, *streams = [np.random.default_rng(s) for s in ss.spawn(N + 1)]
    hemis = 2 if domain.kind == "dual_sphere" else 1
    f = vmf_pair_density(domain, random_vmf_components(base_rng, k, hemispheres=hemis))
    dens_, warps = [], []
    for rng in streams:
        g = tuple(simulate_sphere_warp(domain.ico, rng, scale, L) for _ in range(hemis))
        g = g if hemis == 2 else g[0]
        dens_.append(warp_density_sphere(f, g))
        warps.append(g)
    return f, dens_, warps
