"""Command-line entry point: ``conalign {simulate,register,template,evaluate}``.

Exit codes: 0 success, 2 invalid input, 3 convergence failure (only with
``--strict``, or a failed ``--assert``), 4 file errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from . import simulate as sim
from .errors import DomainError, ValidationError
from .register import RegistrationConfig, invert_warp, register_pair, warp_distance
from .template import TemplateConfig, full_pipeline

log = logging.getLogger("conalign")

EXIT_OK, EXIT_INVALID, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

# keys a --config file may set; flags given on the command line win
CONFIG_KEYS = {
    "input", "output", "seed", "domain", "step_size", "epsilon", "basis_size",
    "max_iters", "multires", "threads", "assert_", "strict", "n_subjects", "truth",
    "precondition", "verbose",
}


class ConvergenceFailure(RuntimeError):
    pass


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-i", "--input", action="append", help="input file (repeatable)")
    common.add_argument("-o", "--output", help="output directory or file")
    common.add_argument("--config", help="JSON file with default values for these flags")
    common.add_argument("--seed", type=int)
    common.add_argument("--domain", help="interval[:n], sphere:G or dual:G")
    common.add_argument("--step-size", type=float, dest="step_size")
    common.add_argument("--epsilon", type=float, help="gradient-norm tolerance")
    common.add_argument("--basis-size", type=int, dest="basis_size")
    common.add_argument("--max-iters", type=int, dest="max_iters")
    common.add_argument("--precondition", type=float)
    common.add_argument("--multires", action="store_true", default=None)
    common.add_argument("--threads", type=int)
    common.add_argument("--strict", action="store_true", default=None,
                        help="exit 3 when the optimiser stops before meeting its tolerance")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="conalign", description="Align connectivity densities.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a warped population")
    s.add_argument("-n", "--n-subjects", type=int, dest="n_subjects")
    sub.add_parser("register", parents=[common], help="register the second input onto the first")
    sub.add_parser("template", parents=[common], help="build a template from the inputs")
    e = sub.add_parser("evaluate", parents=[common], help="warp-recovery statistics")
    e.add_argument("--truth", help="manifest written by 'simulate'")
    e.add_argument("--assert", action="store_true", default=None, dest="assert_",
                   help="exit 3 unless the recovery thresholds are met")
    return p


def _merge_config(args):
    if not args.config:
        return args
    try:
        cfg = io.read_json(args.config)
    except OSError as exc:
        raise OSError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.config}: invalid JSON ({exc})") from exc
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    if "assert" in cfg:
        cfg["assert_"] = cfg.pop("assert")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for k, v in cfg.items():
        if getattr(args, k, None) is None:
            setattr(args, k, v)
    return args


def _reg_config(args) -> RegistrationConfig:
    kw = {}
    if args.step_size is not None:
        kw["step_size"] = args.step_size
    if args.epsilon is not None:
        kw["tolerance"] = args.epsilon
    if args.basis_size is not None:
        kw["basis_size"] = args.basis_size
    if args.max_iters is not None:
        kw["max_iterations"] = args.max_iters
    if args.precondition is not None:
        kw["precondition"] = args.precondition
    if args.multires:
        kw["multires"] = True
    return RegistrationConfig(**kw)


def _inputs(args, n=None):
    paths = args.input or []
    if n is not None and len(paths) != n:
        raise ValidationError(f"expected {n} --input files, got {len(paths)}")
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")
    return paths


def _outdir(args):
    if not args.output:
        raise ValidationError("--output is required")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    out = _outdir(args)
    n = args.n_subjects or 10
    seed = 0 if args.seed is None else args.seed
    dom = io.parse_domain(args.domain or "interval:200")
    manifest = {"command": "simulate", "seed": seed, "n_subjects": n,
                "domain": io.domain_to_dict(dom), "subjects": []}
    if dom.kind == "interval":
        dens_, warps = sim.simulate_population(n, seed, grid=dom.grid)
        manifest["endpoints"] = sim.DEFAULT_ENDPOINTS.to_list()
        manifest["warp_knots"] = sim.DEFAULT_KNOTS
        manifest["slope_power"] = sim.DEFAULT_SLOPE_POWER
    else:
        base, dens_, warps = sim.simulate_sphere_population(n, dom, seed)
        io.save_density(base, out / "base.csv")
        manifest["base"] = "base.csv"
    for j, (f, g) in enumerate(zip(dens_, warps)):
        fname, wname = f"subject_{j:03d}.csv", f"warp_true_{j:03d}.csv"
        io.save_density(f, out / fname)
        io.save_warp(g, out / wname)
        manifest["subjects"].append({"id": f"subject_{j:03d}", "density": fname, "true_warp": wname})
    io.write_json(out / "manifest.json", manifest)
    print(f"wrote {n} subjects to {out}")
    return EXIT_OK


def cmd_register(args):
    p1, p2 = _inputs(args, 2)
    out = _outdir(args)
    f1, f2 = io.load_density(p1), io.load_density(p2)
    cfg = _reg_config(args)
    res = register_pair(f1, f2, cfg)
    io.save_warp(res.warp, out / "warp.csv")
    from .density import q_unmap
    io.save_density(q_unmap(res.aligned), out / "aligned.csv")
    diag = res.diagnostics()
    diag.update({"fixed": p1, "moving": p2, "warp_size": warp_distance(res.warp)})
    io.write_json(out / "diagnostics.json", diag)
    io.save_trace_csv(out / "cost_trace.csv", {"cost": res.cost_trace})
    io.save_trace_svg(out / "cost_trace.svg", res.cost_trace)
    print(f"cost {res.cost_trace[0]:.6g} -> {res.cost_trace[-1]:.6g} in {res.iterations} "
          f"iterations (converged: {res.converged})")
    if args.strict and not res.converged:
        raise ConvergenceFailure("registration stopped before meeting the tolerance")
    return EXIT_OK


def cmd_template(args):
    paths = _inputs(args)
    if len(paths) < 2:
        raise ValidationError("template needs at least two --input files")
    out = _outdir(args)
    fs = [io.load_density(p) for p in paths]
    tcfg = TemplateConfig(registration=_reg_config(args), threads=args.threads or 1)
    res = full_pipeline(fs, tcfg)
    io.save_density(res.template, out / "template.csv")
    manifest = {"command": "template", "template": "template.csv", "subjects": []}
    manifest.update(res.diagnostics())
    for j, p in enumerate(paths):
        entry = {"id": Path(p).stem, "input": str(p), "failed": j in res.failures}
        if res.warps[j] is not None:
            entry["warp"] = f"warp_{j:03d}.csv"
            entry["aligned"] = f"aligned_{j:03d}.csv"
            io.save_warp(res.warps[j], out / entry["warp"])
            io.save_density(res.aligned[j], out / entry["aligned"])
        manifest["subjects"].append(entry)
    io.write_json(out / "manifest.json", manifest)
    io.save_trace_csv(out / "update_norms.csv", {"update_norm": res.update_norms})
    print(f"template from {len(fs)} subjects, {len(res.update_norms)} outer iterations, "
          f"failures: {res.failures}")
    if args.strict and (not res.converged or res.failures):
        raise ConvergenceFailure("template iteration did not converge")
    return EXIT_OK


def _warp_error(g, est):
    if isinstance(g, tuple):
        return float(np.sqrt(sum(_warp_error(a, b) ** 2 for a, b in zip(g, est))))
    if hasattr(g, "grid"):
        return sim.l2_warp_error(g, invert_warp(est))
    from .template import _invert
    return warp_distance(g, _invert(est))


def cmd_evaluate(args):
    (est_manifest,) = _inputs(args, 1)
    if not args.truth:
        raise ValidationError("--truth <simulate manifest> is required")
    truth_path = Path(args.truth)
    if not truth_path.exists():
        raise FileNotFoundError(f"truth manifest not found: {truth_path}")
    truth = io.read_json(truth_path)
    est = io.read_json(est_manifest)
    est_dir = Path(est_manifest).parent
    rows = []
    for t, e in zip(truth["subjects"], est["subjects"]):
        g = io.load_warp(truth_path.parent / t["true_warp"])
        if e.get("failed") or "warp" not in e:
            rows.append((t["id"], np.nan, warp_distance(g)))
            continue
        ghat = io.load_warp(est_dir / e["warp"])
        rows.append((t["id"], _warp_error(g, ghat), warp_distance(g)))
    a = np.array([r[1] for r in rows])
    b = np.array([r[2] for r in rows])
    ok = ~np.isnan(a)
    summary = {
        "N": len(rows), "evaluated": int(ok.sum()),
        "A_mean": float(np.mean(a[ok])), "A_sd": float(np.std(a[ok], ddof=1)) if ok.sum() > 1 else 0.0,
        "B_mean": float(np.mean(b)), "B_sd": float(np.std(b, ddof=1)) if len(b) > 1 else 0.0,
    }
    summary["pass"] = bool(summary["A_mean"] <= 0.10 and 0.18 <= summary["B_mean"] <= 0.30
                           and summary["A_mean"] <= 0.5 * summary["B_mean"])
    out = Path(args.output) if args.output else Path(est_manifest).parent / "evaluation.json"
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "evaluation.json"
    io.write_json(out, summary)
    io.save_trace_csv(out.with_suffix(".csv"), {"A": a, "B": b})
    print(f"A = {summary['A_mean']:.3f} ({summary['A_sd']:.3f})  "
          f"B = {summary['B_mean']:.3f} ({summary['B_sd']:.3f})")
    if args.assert_ and not summary["pass"]:
        raise ConvergenceFailure("recovery thresholds not met")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "register": cmd_register,
            "template": cmd_template, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    for k in ("n_subjects", "truth", "assert_"):
        if not hasattr(args, k):
            setattr(args, k, None)
    try:
        args = _merge_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (ValidationError, DomainError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConvergenceFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
