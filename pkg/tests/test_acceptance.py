"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (also collected in the terminal
summary) and asserts the stated tolerance.  The simulated-population checks
share one N=10 run, which takes a while; select with ``-m slow``.
"""
import time

import numpy as np
import pytest

from conalign import basis as B
from conalign import density as dens
from conalign import geometry as geo
from conalign import register as R
from conalign import simulate as sim
from conalign import template as T
from conalign.density import DomainSpec, HalfDensity

GRID = geo.Grid1D(200)


@pytest.fixture(scope="module")
def densities_1d():
    rng = np.random.default_rng(2024)
    return [sim.estimate_density(sim.simulate_endpoints(seed=rng), GRID) for _ in range(200)]


@pytest.fixture(scope="module")
def population():
    t0 = time.time()
    res = sim.run_table1_experiment(10, seed=0)
    return res, time.time() - t0


# ---------------------------------------------------------------------------
# Simulated population (shared run)
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_warp_recovery_on_simulated_population(population, report):
    res, secs = population
    s = res.summary()
    ok = (s["A_mean"] <= 0.10 and 0.18 <= s["B_mean"] <= 0.30
          and s["A_mean"] <= 0.5 * s["B_mean"] and not s["failed"])
    report("warp recovery, N=10 population",
           ok, f"A = {s['A_mean']:.3f} ({s['A_sd']:.3f}), B = {s['B_mean']:.3f} ({s['B_sd']:.3f}), "
               f"need A <= 0.10, B in [0.18, 0.30], A <= B/2; {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_template_fixed_point_and_centering(population, report):
    res, _ = population
    pipe = res.pipeline
    residual = pipe.update_norms[-1]
    eps1 = T.TemplateConfig().tol
    gbar = T.karcher_mean_warps([w for w in pipe.warps if w is not None])
    off = R.warp_distance(gbar)
    ok = residual <= eps1 and off <= 5e-2
    report("template fixed point and centering",
           ok, f"mean-log residual {residual:.2e} (need <= {eps1:g}, {len(pipe.update_norms)} outer "
               f"iterations), mean re-registration warp L2 {off:.2e} (need <= 5e-2)")
    assert ok


@pytest.mark.slow
def test_alignment_reduces_variance(population, report):
    res, _ = population
    pipe = res.pipeline
    before = np.stack([f.values for f in res.densities]).var(axis=0)
    after = np.stack([f.values for f in pipe.aligned]).var(axis=0)
    frac = float(np.mean(after <= before))
    ok = frac >= 0.8
    report("aligned variance <= unaligned", ok, f"{frac:.3f} of node pairs (need >= 0.80)")
    assert ok


# ---------------------------------------------------------------------------
# Isometry and constraints
# ---------------------------------------------------------------------------

def test_isometry(densities_1d, ico4, report):
    rng = np.random.default_rng(7)
    qs = [dens.q_map(f) for f in densities_1d]
    worst = 0.0
    for k in range(200):
        i, j = rng.choice(len(qs), 2, replace=False)
        g = sim.simulate_warp_1d(seed=rng, grid=GRID)
        d0 = dens.riemannian_distance(qs[i], qs[j])
        d1 = dens.riemannian_distance(dens.warp_half_density_1d(qs[i], g), dens.warp_half_density_1d(qs[j], g))
        worst = max(worst, abs(d0 - d1))
    dom = DomainSpec.sphere(ico4)
    worst_s = 0.0
    for k in range(10):
        comps = [sim.random_vmf_components(rng) for _ in range(2)]
        q1, q2 = (dens.q_map(sim.vmf_pair_density(dom, c)) for c in comps)
        g = sim.simulate_sphere_warp(ico4, rng)
        d0 = dens.riemannian_distance(q1, q2)
        d1 = dens.riemannian_distance(dens.warp_half_density_sphere(q1, g), dens.warp_half_density_sphere(q2, g))
        worst_s = max(worst_s, abs(d0 - d1))
    ok = worst <= 5e-3 and worst_s <= 5e-2
    report("isometry of the warping action", ok,
           f"[0,1] max gap {worst:.2e} over 200 triples (need <= 5e-3); "
           f"sphere level 4 max gap {worst_s:.2e} over 10 triples (need <= 5e-2)")
    assert ok


@pytest.mark.slow
def test_constraint_preservation(densities_1d, ico4, report):
    rng = np.random.default_rng(8)
    sym = nonneg = True
    worst_int = worst_raw = 0.0
    for f in densities_1d:
        g = sim.simulate_warp_1d(seed=rng, grid=GRID)
        out = dens.warp_density_1d(f, g)
        _, drift = dens.action_1d(dens.q_map(f), g, renormalize=False)
        sym &= np.array_equal(out.values, out.values.T)
        nonneg &= bool(out.values.min() >= 0)
        worst_int = max(worst_int, abs(out.integral() - 1))
        worst_raw = max(worst_raw, abs((1 + drift) ** 2 - 1))
    dom = DomainSpec.sphere(ico4)
    drifts, worst_sint = [], 0.0
    for k in range(200):
        f = sim.vmf_pair_density(dom, sim.random_vmf_components(rng))
        g = sim.simulate_sphere_warp(ico4, rng)
        vals, drift = dens.sphere_action(dens.q_map(f), g)
        out = dens.q_unmap(HalfDensity(dom, vals))
        drifts.append(abs(drift))
        sym &= np.array_equal(out.values, out.values.T)
        nonneg &= bool(out.values.min() >= 0)
        worst_sint = max(worst_sint, abs(out.integral() - 1))
    ok = sym and nonneg and worst_int <= 2e-4 and max(drifts) <= 1e-2
    report("constraint preservation", ok,
           f"symmetric {sym}, nonnegative {nonneg}; [0,1] integral error {worst_int:.1e} (need <= 2e-4; "
           f"raw mass drift before renormalisation {worst_raw:.1e}); sphere level 4 logged norm drift "
           f"max {max(drifts):.1e}, median {np.median(drifts):.1e} (need <= 1e-2), "
           f"integral error after renormalisation {worst_sint:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _fd_1d(q1, q2, g, b, cfg, t=1e-5):
    def H(s):
        w = R.compose_warps(g, R.incremental_warp(b, s, GRID))
        return dens.alignment_cost(q1, R.apply_warp(q2, w, cfg)[0])
    return (H(t) - H(-t)) / (2 * t)


def test_gradient_matches_finite_differences(ico4, report):
    cfg = R.RegistrationConfig().resolve("interval", GRID.n)
    basis = B.sine_basis(GRID, cfg.basis_size)
    pop, warps = sim.simulate_population(21, 3, grid=GRID)
    errs = []
    for k in range(20):
        q1, q2, g = dens.q_map(pop[k]), dens.q_map(pop[k + 1]), warps[k]
        warped, drift = R.apply_warp(q2, g, cfg)
        kw = R._grad_kw(cfg)
        kw["partial_x"] = dens.warped_partial_x_1d(q2, g, warped, 1 / (1 + drift))
        c = R.gradient_coefficients(q1, warped, basis, **kw)
        fd = np.array([_fd_1d(q1, q2, g, R.basis_field(basis, i), cfg) for i in range(len(basis))])
        errs.append(np.linalg.norm(fd - c) / np.linalg.norm(fd))

    dom = DomainSpec.sphere(ico4)
    scfg = R.RegistrationConfig().resolve("sphere")
    hb = B.harmonic_tangent_basis(ico4, scfg.basis_size)
    rng = np.random.default_rng(0)
    serrs = []
    for k in range(20):
        q1 = dens.q_map(sim.vmf_pair_density(dom, sim.random_vmf_components(rng)))
        q2 = R.apply_warp(q1, sim.simulate_sphere_warp(ico4, rng, scale=0.15), scfg)[0]
        c = R.gradient_coefficients(q1, q2, hb, **R._grad_kw(scfg))
        a = rng.standard_normal(len(hb))
        a /= np.linalg.norm(a)
        field = R.assemble(hb, a)

        def H(s):
            return dens.alignment_cost(q1, R.apply_warp(q2, R.incremental_warp(field, s, ico4), scfg)[0])
        fd = (H(1e-5) - H(-1e-5)) / 2e-5
        serrs.append(abs(fd - c @ a) / abs(fd))
    ok = max(errs) <= 1e-3 and max(serrs) <= 2e-2
    report("analytic gradient vs central differences", ok,
           f"[0,1] max relative error {max(errs):.1e} over 20 triples (need <= 1e-3); "
           f"sphere level 4 max {max(serrs):.1e} over 20 triples (need <= 2e-2)")
    assert ok


def test_dual_cross_block_gradient(ico3, report):
    dom = DomainSpec.dual_sphere(ico3)
    V = ico3.n_vertices
    mu = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    comps = [(1.0, (0, mu[0]), (0, mu[1]), 4.0), (1.0, (1, mu[1]), (1, mu[0]), 4.0),
             (0.5, (0, mu[0]), (1, mu[0]), 4.0)]
    q1 = dens.q_map(sim.vmf_pair_density(dom, comps))
    vals = q1.values.copy()
    vals[V:, V:] *= 1.3  # differences confined to the second hemisphere's own block
    q2 = HalfDensity(dom, vals)
    hb = B.harmonic_tangent_basis(ico3, 4)
    first = np.abs(R.gradient_coefficients(q1, q2, hb, hemisphere=0)).max()
    second = np.abs(R.gradient_coefficients(q1, q2, hb, hemisphere=1)).max()
    ok = first <= 1e-8 and second > 1e-3
    report("opposite-hemisphere block gives no gradient", ok,
           f"first-hemisphere gradient max {first:.1e} (need <= 1e-8); control {second:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# Basis and mesh
# ---------------------------------------------------------------------------

def test_divergence_structure(ico4, report):
    hb = B.harmonic_tangent_basis(ico4, 6)
    pts = ico4.vertices
    rot = max(np.abs(B.flux_divergence(e, pts)).max() for e in hb if e.kind == "rotated")
    grad = max(np.abs(B.flux_divergence(e, pts) - e.divergence).max() / np.abs(e.divergence).max()
               for e in hb if e.kind == "gradient")
    ok = rot <= 1e-3 and grad <= 1e-2
    report("divergence of the tangent basis", ok,
           f"rotated max |div| {rot:.1e} (need <= 1e-3); gradient-kind max relative gap "
           f"{grad:.1e} (need <= 1e-2), level 4, degree <= 6")
    assert ok


def test_icosphere_counts_and_nesting(report):
    levels = [geo.build_icosphere(G) for G in range(7)]
    counts = all(ico.n_vertices == 10 * 4 ** G + 2 for G, ico in enumerate(levels))
    nested = all(np.array_equal(fine.vertices[:coarse.n_vertices], coarse.vertices)
                 for coarse, fine in zip(levels, levels[1:]))
    ok = counts and nested
    report("icosphere vertex counts and nesting", ok,
           f"counts {[ico.n_vertices for ico in levels]}, nested exactly: {nested}")
    assert ok


# ---------------------------------------------------------------------------
# Inverse consistency
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_inverse_consistency(report):
    gaps = []
    for k in range(20):
        fs, _ = sim.simulate_population(2, 500 + k, grid=GRID)
        fwd = R.register_pair(fs[0], fs[1]).warp
        back = R.register_pair(fs[1], fs[0]).warp
        gaps.append(R.warp_distance(R.compose_warps(fwd, back)))
    gaps = np.array(gaps)
    ok = gaps.max() <= 5e-2
    report("inverse consistency", ok,
           f"max L2 gap to identity {gaps.max():.3f}, median {np.median(gaps):.3f}, "
           f"{int(np.sum(gaps > 5e-2))} of 20 pairs over 5e-2")
    assert ok
