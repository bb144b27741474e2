import numpy as np
import pytest

from conalign import density as dens
from conalign import geometry as geo
from conalign import simulate as sim


@pytest.fixture(scope="session")
def ico2():
    return geo.build_icosphere(2)


@pytest.fixture(scope="session")
def ico3():
    return geo.build_icosphere(3)


@pytest.fixture(scope="session")
def ico4():
    return geo.build_icosphere(4)


@pytest.fixture(scope="session")
def grid200():
    return geo.Grid1D(200)


def random_unit(rng, n):
    p = rng.standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def random_tangent(rng, x, scale=1.0):
    v = rng.standard_normal(x.shape) * scale
    return v - np.sum(v * x, axis=-1, keepdims=True) * x


def interval_density(seed, n=200, pairs=2000):
    """Kernel estimate from a small seeded endpoint sample on an ``n`` grid."""
    params = sim.EndpointParams.from_list([[pairs, 0.3, 0.7, 0.02], [pairs // 2, 0.6, 0.6, 0.01]])
    pts = sim.simulate_endpoints(params, seed)
    return sim.estimate_density(pts, geo.Grid1D(n))


def sphere_density(domain, seed, k=3):
    rng = np.random.default_rng(seed)
    return sim.vmf_pair_density(domain, sim.random_vmf_components(
        rng, k, hemispheres=2 if domain.kind == "dual_sphere" else 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance check, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
