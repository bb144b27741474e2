"""Plain-text file formats.

* Density / half-density: row-major CSV of the full node matrix plus a JSON
  sidecar ``<file>.json`` describing the domain.
* Warp on [0, 1]: CSV with columns ``x, gamma``.
* Sphere warp: CSV with columns ``vertex, x, y, z`` (image of each vertex).
  A hemisphere pair is stored as two such files, ``<stem>.h1.csv`` and
  ``<stem>.h2.csv``.
* Icosphere: JSON header ``{level, n_vertices, vertices}`` plus a CSV of
  vertex coordinates.

Floats are written with 17 significant digits so values round-trip exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import geometry as geo
from .density import DensityField, DomainSpec, HalfDensity, SphereWarp, Warp1D
from .errors import ValidationError

FMT = "%.17g"


def _write_csv(path, arr, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, arr, fmt=FMT, delimiter=",", header=header or "", comments="")


def _read_csv(path, skip_header):
    return np.loadtxt(path, delimiter=",", skiprows=1 if skip_header else 0, ndmin=2)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _level_from_count(V):
    G = 0
    while 10 * 4 ** G + 2 < V:
        G += 1
    if 10 * 4 ** G + 2 != V:
        raise ValidationError(f"{V} is not an icosphere vertex count")
    return G


# ---------------------------------------------------------------------------
# Domains and icospheres
# ---------------------------------------------------------------------------

def domain_to_dict(domain: DomainSpec) -> dict:
    if domain.kind == "interval":
        return {"domain": "interval", "n": domain.grid.n}
    return {"domain": domain.kind, "level": domain.ico.level}


def domain_from_dict(d) -> DomainSpec:
    kind = d.get("domain")
    if kind == "interval":
        return DomainSpec.interval(int(d["n"]))
    if kind == "sphere":
        return DomainSpec.sphere(int(d["level"]))
    if kind == "dual_sphere":
        return DomainSpec.dual_sphere(int(d["level"]))
    raise ValidationError(f"unknown domain {kind!r}")


def parse_domain(text: str) -> DomainSpec:
    """``interval[:n]``, ``sphere:G`` or ``dual:G``."""
    name, _, arg = text.partition(":")
    if name == "interval":
        return DomainSpec.interval(int(arg) if arg else 200)
    if name == "sphere":
        return DomainSpec.sphere(int(arg) if arg else 4)
    if name in ("dual", "dual_sphere"):
        return DomainSpec.dual_sphere(int(arg) if arg else 4)
    raise ValidationError(f"unknown domain selector {text!r}")


def save_icosphere(ico: geo.Icosphere, path):
    """Write ``path`` (JSON header) and the sibling vertex CSV."""
    path = Path(path)
    csv = path.with_suffix(".csv")
    _write_csv(csv, ico.vertices, header="x,y,z")
    write_json(path, {"level": ico.level, "n_vertices": ico.n_vertices, "vertices": csv.name})


def load_icosphere(path) -> geo.Icosphere:
    """Rebuild the icosphere named by a header and check it against the stored vertices."""
    path = Path(path)
    head = read_json(path)
    ico = geo.build_icosphere(int(head["level"]))
    v = _read_csv(path.parent / head["vertices"], True)
    if v.shape != ico.vertices.shape or not np.array_equal(v, ico.vertices):
        raise ValidationError(f"{path}: stored vertices do not match level {head['level']}")
    return ico


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_density(f: DensityField | HalfDensity, path):
    kind = "half_density" if isinstance(f, HalfDensity) else "density"
    _write_csv(path, f.values)
    meta = domain_to_dict(f.domain)
    meta.update({"symmetric": True, "kind": kind})
    write_json(_sidecar(path), meta)


def load_density(path, kind=None):
    """Read a density (or half-density) written by :func:`save_density`."""
    meta = read_json(_sidecar(path))
    dom = domain_from_dict(meta)
    vals = _read_csv(path, False)
    n = dom.n_nodes
    if vals.shape != (n, n):
        raise ValidationError(f"{path}: expected a {n}x{n} matrix, got {vals.shape}")
    kind = kind or meta.get("kind", "density")
    cls = HalfDensity if kind == "half_density" else DensityField
    return cls(dom, vals)


# ---------------------------------------------------------------------------
# Warps
# ---------------------------------------------------------------------------

def _pair_paths(path):
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".h1.csv"), path.with_name(stem + ".h2.csv")


def save_warp(warp, path):
    if isinstance(warp, tuple):
        for w, p in zip(warp, _pair_paths(path)):
            save_warp(w, p)
        return
    if isinstance(warp, Warp1D):
        _write_csv(path, np.column_stack([warp.grid.points, warp.values]), header="x,gamma")
        return
    idx = np.arange(warp.ico.n_vertices)
    _write_csv(path, np.column_stack([idx, warp.targets]), header="vertex,x,y,z")


def load_warp(path):
    """Read a warp; a missing ``path`` with ``.h1``/``.h2`` siblings gives a hemisphere pair."""
    path = Path(path)
    if not path.exists():
        h1, h2 = _pair_paths(path)
        if h1.exists() and h2.exists():
            return load_warp(h1), load_warp(h2)
        raise FileNotFoundError(f"no warp file at {path}")
    with open(path) as fh:
        header = fh.readline().strip()
    data = _read_csv(path, True)
    if header == "x,gamma":
        grid = geo.Grid1D(len(data))
        if not np.allclose(data[:, 0], grid.points, rtol=0, atol=1e-12):
            raise ValidationError(f"{path}: x column is not a uniform grid on [0, 1]")
        return Warp1D.from_values(grid, data[:, 1])
    if header == "vertex,x,y,z":
        ico = geo.build_icosphere(_level_from_count(len(data)))
        order = np.argsort(data[:, 0])
        return SphereWarp(ico, data[order, 1:4]).with_jacobians()
    raise ValidationError(f"{path}: unrecognised warp header {header!r}")


def save_trace_csv(path, columns: dict):
    names = list(columns)
    n = max(len(v) for v in columns.values())
    arr = np.full((n, len(names) + 1), np.nan)
    arr[:, 0] = np.arange(n)
    for j, k in enumerate(names):
        arr[:len(columns[k]), j + 1] = columns[k]
    _write_csv(path, arr, header=",".join(["iteration"] + names))


def save_trace_svg(path, values, title="cost", width=480, height=240):
    """Small self-contained SVG line plot of a trace."""
    y = np.asarray(values, dtype=float)
    pad = 30
    if len(y) < 2:
        y = np.repeat(y, 2)
    lo, hi = float(np.min(y)), float(np.max(y))
    span = hi - lo if hi > lo else 1.0
    xs = pad + (width - 2 * pad) * np.arange(len(y)) / (len(y) - 1)
    ys = height - pad - (height - 2 * pad) * (y - lo) / span
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
        f'<text x="{pad}" y="18" font-size="12" font-family="sans-serif">{title}: '
        f'{hi:.4g} to {y[-1]:.4g} over {len(values) - 1} iterations</text>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>\n'
        "</svg>\n")
    Path(path).write_text(svg)
