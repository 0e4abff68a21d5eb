"""Command line entry point: ``qpreduce {run,sweep,certify-omega,spectrum,report}``.

Exit codes:
  0  success
  1  unexpected failure
  2  usage or configuration error
  3  growth hypotheses violated (beta >= 2 ell - 1 or beta1 > ell)
  4  spectral stage failed (invalid potential, degenerate or unresolved spectrum)
  5  a perturbation symbol is not in its declared class
  6  the gauge left a magnetic component
  7  the reducibility iteration did not converge (small divisor, divergence, step budget)
  8  the time integrator failed its norm-drift check
  9  direct and reduced dynamics disagree beyond the budget
  10 frequency not certified (certify-omega)
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, bundled_presets, load_config
from .diophantine import check_diophantine
from .pipeline import SWEEP_AXES, ExitCode, _csv, _dump_json, run_pipeline, sweep
from .spectral_basis import build_basis, fit_eigenvalue_exponent
from .symbols import HypothesisViolation

log = logging.getLogger("qpreduce")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", required=True, help="bundled preset name or YAML file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path)")
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument(
        "--allow-out-of-hypothesis",
        action="store_true",
        help="run even if beta >= 2 ell - 1 or beta1 > ell (negative tests)",
    )


def _load(args):
    overrides = list(args.set)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"rng_seed={args.seed}")
    return load_config(args.config, overrides, True if args.allow_out_of_hypothesis else None)


def _cmd_run(args) -> int:
    cfg = _load(args)
    res = run_pipeline(
        cfg,
        args.out,
        simulate=False if args.no_simulate else None,
        dump_operators=args.dump_operators,
        t_end=args.t_end,
    )
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    return int(res.exit_code)


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [v for v in args.values if v != ""]
    if not values:
        print("sweep: --values must list at least one value", file=sys.stderr)
        return int(ExitCode.USAGE)
    text, summary = sweep(cfg, args.axis, values, args.out, simulate=args.simulate, n_samples=args.samples)
    sys.stdout.write(text)
    print(json.dumps(summary, sort_keys=True))
    return int(ExitCode.OK)


def _cmd_certify(args) -> int:
    omega = [float(v) for v in args.omega.split(",")]
    tau = args.tau if args.tau is not None else float(len(omega))
    res = check_diophantine(omega, args.gamma, tau, args.K)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return int(ExitCode.OK if res.certified else ExitCode.NOT_CERTIFIED)


def _cmd_spectrum(args) -> int:
    cfg = _load(args)
    n_keep = args.n_modes or cfg.n_modes
    basis = build_basis(cfg.potential, cfg.discretization, n_keep)
    rows = list(enumerate(basis.eigenvalues))
    text = _csv(["j", "lambda_v"], rows, cfg.hash())
    j_max = min(args.j_max, basis.n_modes - 1)
    fit = None
    if j_max - args.j_min + 1 >= 8:
        d, c, rms = fit_eigenvalue_exponent(basis, args.j_min, j_max)
        fit = {"d_est": d, "c_est": c, "residual": rms, "d_expected": cfg.potential.d_exponent, "window": [args.j_min, j_max]}
    report = {"fit": fit, "orthonormality_defect": basis.orthonormality_defect()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "spectrum.csv").write_text(text, encoding="utf-8")
        (out / "spectrum_fit.json").write_text(_dump_json(dict(report, config_hash=cfg.hash())), encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(json.dumps(report, sort_keys=True))
    return int(ExitCode.OK)


def _cmd_report(args) -> int:
    d = Path(args.dir)
    try:
        summary = json.loads((d / "summary.json").read_text(encoding="utf-8"))
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        print(f"report: {err}", file=sys.stderr)
        return int(ExitCode.USAGE)
    code = manifest["exit_code"]
    lines = [f"run {manifest['name']} (config {manifest['config_hash']}): exit {code} ({ExitCode(code).name})"]
    g = summary.get("gauge")
    if g:
        lines.append(f"gauge: magnetic ratio {g['magnetic_ratio']:.3e}")
    k = summary.get("kam")
    if k:
        if k.get("converged"):
            th = ", ".join(f"{t:.2f}" for t in k["theta"])
            lines.append(f"kam: {k['steps']} steps, residual {k['final_residual']:.3e}, theta [{th}]")
        else:
            lines.append(f"kam: not converged: {k.get('reason')}")
    if summary.get("shift_exponent") is not None:
        lines.append(f"shift exponent: {summary['shift_exponent']:.4f}")
    s = summary.get("simulation")
    if s:
        if "max_deviation" in s:
            lines.append(f"dynamics: max deviation {s['max_deviation']:.3e} (budget {s['deviation_budget']:.1e})")
        for key, v in sorted(s.get("norm_trend", {}).items()):
            lines.append(f"H^{key} norm trend over the run: {100 * v:+.3f}% of initial")
        if "monodromy_mismatch" in s:
            lines.append(f"monodromy vs reduced spectrum: {s['monodromy_mismatch']:.3e}")
    print("\n".join(lines))
    return int(ExitCode.OK)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpreduce", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline: gauge, reduction, simulation, comparison")
    _add_config_args(p)
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--no-simulate", action="store_true", help="stop after the reduction")
    p.add_argument("--t-end", type=float, help="override the simulation horizon")
    p.add_argument("--dump-operators", action="store_true", help="save H and the gauged H1 as .npz")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="repeat the pipeline along one axis")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", nargs="*", default=[], help="axis values (j-window as lo:hi, omega as a,b or a count)")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--simulate", action="store_true", help="also simulate each eps row")
    p.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples for the gamma axis")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("certify-omega", help="Diophantine scan of a frequency vector")
    p.add_argument("--omega", required=True, help="comma-separated components")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--tau", type=float, help="default: n")
    p.add_argument("-K", type=int, default=50, help="largest |k|_1 scanned")
    p.set_defaults(func=_cmd_certify)

    p = sub.add_parser("spectrum", help="eigenvalues of H0 and the fitted growth exponent")
    _add_config_args(p)
    p.add_argument("-o", "--out")
    p.add_argument("--n-modes", type=int)
    p.add_argument("--j-min", type=int, default=20)
    p.add_argument("--j-max", type=int, default=100)
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and int(ExitCode.USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HypothesisViolation as err:
        print(f"hypothesis gate: {err}", file=sys.stderr)
        return int(ExitCode.HYPOTHESIS)
    except ConfigError as err:
        print(f"config: {err}", file=sys.stderr)
        return int(ExitCode.USAGE)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return int(ExitCode.USAGE)


if __name__ == "__main__":
    sys.exit(main())
