"""End-to-end experiment: basis, gauge, reduction, simulation, comparison.

Artifacts are written without timestamps so that a rerun of the same
configuration reproduces every file byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .conjugation import apply_gauge
from .diophantine import check_diophantine, measure_estimate
from .floquet import (
    IntegratorError,
    compare_reduced,
    monodromy_quasienergies,
    norm_trend,
    propagate,
    quasienergy_mismatch,
    tail_population,
    track_norms,
)
from .kam import KAMParams, ReducibilityError, SmallDivisorError, kam_iterate, trace_csv
from .spectral_basis import InvariantViolation, build_basis
from .symbols import HypothesisViolation, check_symbol_class

__all__ = [
    "ExitCode",
    "PipelineResult",
    "run_pipeline",
    "kam_params",
    "shift_exponent",
    "fit_through_origin",
    "sweep",
    "SWEEP_AXES",
]

log = logging.getLogger("qpreduce")


class ExitCode(IntEnum):
    OK = 0
    FAILURE = 1
    USAGE = 2
    HYPOTHESIS = 3
    SPECTRUM = 4
    SYMBOL_CLASS = 5
    GAUGE = 6
    KAM = 7
    INTEGRATOR = 8
    VALIDATION = 9
    NOT_CERTIFIED = 10


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv(header, rows, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def kam_params(cfg: ExperimentConfig) -> KAMParams:
    k = cfg.raw["kam"]
    return KAMParams(
        gamma=cfg.gamma,
        tau=cfg.tau,
        K=int(k["K"]),
        d=cfg.potential.d_exponent,
        tol_final=float(k["tol_final"]),
        max_steps=int(k["max_steps"]),
        diag_mode=str(k["diag_mode"]),
        phase_factor=int(k["phase_factor"]),
    )


def shift_exponent(lambda_inf, lambda_v, j_lo: int, j_hi: int) -> tuple[float, float]:
    """Slope and intercept of log |lambda_inf - lambda_v| against log j over [j_lo, j_hi)."""
    j = np.arange(j_lo, j_hi)
    shift = np.abs(np.asarray(lambda_inf)[j_lo:j_hi] - np.asarray(lambda_v)[j_lo:j_hi])
    if np.any(shift <= 0):
        raise ValueError("zero shift inside the fit window")
    slope, icpt = np.polyfit(np.log(j), np.log(shift), 1)
    return float(slope), float(icpt)


def fit_through_origin(x, y) -> tuple[float, float]:
    """Least-squares slope of y = a x and the coefficient of determination."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = float(x @ y / (x @ x))
    ss_res = float(np.sum((y - a * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return a, (1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0


@dataclass
class PipelineResult:
    exit_code: ExitCode
    summary: dict
    files: dict = field(default_factory=dict)
    error: dict | None = None
    objects: dict = field(default_factory=dict, repr=False)


class _StageError(Exception):
    def __init__(self, code: ExitCode, stage: str, message: str):
        super().__init__(message)
        self.code = code
        self.stage = stage


def _symbol_checks(cfg, basis, summary):
    k_max = int(cfg.raw["symbol_check"]["k_max"])
    x = basis.position_grid
    out = {}
    for name, W in (("W0", cfg.W0), ("W1", cfg.W1)):
        if W.is_zero():
            continue
        rep = check_symbol_class(W, W.declared_order, k_max=k_max, grid=x)
        out[name] = {
            "order": W.declared_order,
            "passed": rep.passed,
            "constants": rep.constants,
            "halfwidth": rep.halfwidth,
            "failures": [list(f) for f in rep.failures],
        }
        if not rep.passed and not cfg.raw.get("allow_out_of_hypothesis", False):
            summary["symbol_class"] = out
            raise _StageError(ExitCode.SYMBOL_CLASS, "symbol_class", f"{name}: {rep.summary()}")
    summary["symbol_class"] = out


def run_pipeline(
    cfg: ExperimentConfig,
    outdir=None,
    simulate: bool | None = None,
    dump_operators: bool = False,
    t_end: float | None = None,
) -> PipelineResult:
    """Run every stage, write artifacts into ``outdir`` (if given) and return
    the exit code with a summary.  A failing stage stops the chain except
    that a KAM failure still runs the simulation so that the norm series of
    a resonant run are recorded."""
    h = cfg.hash()
    summary: dict = {"config_hash": h, "name": cfg.name}
    files: dict = {}
    objects: dict = {}
    error = None
    code = ExitCode.OK
    sim_cfg = cfg.raw["simulation"]
    do_sim = bool(sim_cfg["enabled"]) if simulate is None else simulate
    omega = cfg.omega
    try:
        try:
            basis = build_basis(cfg.potential, cfg.discretization, cfg.n_modes)
        except (InvariantViolation, ValueError, np.linalg.LinAlgError) as err:
            raise _StageError(ExitCode.SPECTRUM, "spectrum", str(err)) from err
        objects["basis"] = basis
        lam_v = basis.eigenvalues
        _symbol_checks(cfg, basis, summary)

        cert = check_diophantine(omega, cfg.gamma, cfg.tau, int(cfg.raw["diophantine"]["K"]))
        summary["diophantine"] = cert.to_dict()

        try:
            g = apply_gauge(cfg.W0, cfg.W1, cfg.eps, omega, basis)
        except HypothesisViolation as err:
            raise _StageError(ExitCode.HYPOTHESIS, "gauge", str(err)) from err
        objects["gauge"] = g
        summary["gauge"] = {
            "magnetic_before": g.magnetic_before,
            "magnetic_after": g.magnetic_after,
            "magnetic_ratio": g.magnetic_ratio,
            "expected_deviation": g.expected_deviation,
            "fourier_tail": g.tail,
            "b_boundary": g.b_boundary,
        }
        # rounding alone leaves ~1e-17 behind when there is no W1 to remove
        allowed = max(1e-8 * g.magnetic_before, 1e-12 * g.H.weighted_norm(0.0))
        if g.magnetic_after > allowed:
            raise _StageError(
                ExitCode.GAUGE,
                "gauge",
                f"magnetic component survives the gauge (ratio {g.magnetic_ratio:.2e}); refine the grid or the phase grid",
            )
        if dump_operators and outdir is not None:
            Path(outdir).mkdir(parents=True, exist_ok=True)
            g.H.save(Path(outdir) / "H.npz")
            g.H1.save(Path(outdir) / "H1.npz")

        params = kam_params(cfg)
        kam_error = None
        try:
            res = kam_iterate(g.H1, omega, params)
            trace = res.trace
            objects["kam"] = res
            lam_inf = res.lambda_inf
            theta = res.theta()
            summary["kam"] = {
                "converged": True,
                "steps": len(trace) - 1,
                "eps": [s.eps for s in trace],
                "theta": theta,
                "final_residual": res.final_residual,
            }
        except ReducibilityError as err:
            kam_error = err
            trace = err.trace
            summary["kam"] = {"converged": False, "steps": max(len(trace) - 1, 0), "reason": str(err)}
            if isinstance(err, SmallDivisorError):
                summary["kam"]["site"] = list(err.site[:2]) + [list(err.site[2])]
        if trace:
            files["kam_trace.csv"] = f"# config_hash: {h}\n" + trace_csv(trace)
        if kam_error is None:
            rows = [(j, lam_v[j], lam_inf[j], lam_inf[j] - lam_v[j]) for j in range(lam_v.size)]
            files["spectrum.csv"] = _csv(["j", "lambda_v", "lambda_inf", "shift"], rows, h)
            N = lam_v.size
            if cfg.eps != 0 and N >= 20:
                try:
                    summary["shift_exponent"] = shift_exponent(lam_inf, lam_v, 10, int(0.8 * N))[0]
                except ValueError:
                    summary["shift_exponent"] = None
        else:
            files["spectrum.csv"] = _csv(["j", "lambda_v"], [(j, v) for j, v in enumerate(lam_v)], h)

        if do_sim:
            psi0 = cfg.psi0()
            dt = sim_cfg.get("dt")
            try:
                traj = propagate(
                    g.H,
                    omega,
                    psi0,
                    float(t_end if t_end is not None else sim_cfg["t_end"]),
                    dt=None if dt is None else float(dt),
                    method=str(sim_cfg["method"]),
                    n_store=int(sim_cfg["n_store"]),
                )
            except IntegratorError as err:
                raise _StageError(ExitCode.INTEGRATOR, "simulation", str(err)) from err
            objects["trajectory"] = traj
            norms = track_norms(traj, [float(s) for s in sim_cfg["s_list"]], basis)
            rows = [(t, s, v[i]) for s, v in norms.items() for i, t in enumerate(traj.times)]
            files["norms.csv"] = _csv(["t", "s", "value"], rows, h)
            sim = {"dt": traj.dt, "norm_drift": traj.norm_drift, "tail_population": tail_population(traj)}
            sim["tail_flagged"] = sim["tail_population"] >= 1e-6
            sim["norm_trend"] = {str(s): norm_trend(traj.times, v)[1] for s, v in norms.items()}
            if kam_error is None:
                U = g.U.compose(res.unitary)
                dev, series = compare_reduced(traj, lam_inf, U, omega, return_series=True)
                files["deviation.csv"] = _csv(["t", "deviation"], zip(traj.times, series), h)
                budget = max(10 * params.tol_final, 1e-4)
                sim["max_deviation"] = dev
                sim["deviation_budget"] = budget
                if cfg.n_freq == 1:
                    mono = monodromy_quasienergies(g.H, omega)
                    mism = quasienergy_mismatch(mono.quasienergies, lam_inf[: min(10, lam_inf.size)], omega)
                    sim["monodromy_mismatch"] = float(mism.max())
                    sim["monodromy_unitarity_defect"] = mono.unitarity_defect
            summary["simulation"] = sim
        if kam_error is not None:
            raise _StageError(ExitCode.KAM, "kam", str(kam_error))
        sim = summary.get("simulation", {})
        if "max_deviation" in sim and not sim["max_deviation"] <= sim["deviation_budget"]:
            raise _StageError(
                ExitCode.VALIDATION,
                "compare",
                f"reduced dynamics deviate by {sim['max_deviation']:.3e} > {sim['deviation_budget']:.1e}",
            )
    except _StageError as err:
        code = err.code
        error = {"stage": err.stage, "exit_code": int(err.code), "message": str(err)}
        log.error("%s stage failed: %s", err.stage, err)
    summary["exit_code"] = int(code)
    files["summary.json"] = _dump_json(summary)
    if error is not None:
        files["error.json"] = _dump_json(dict(error, config_hash=h))
    manifest = {
        "config_hash": h,
        "name": cfg.name,
        "config": cfg.raw,
        "seed": cfg.seed,
        "exit_code": int(code),
        "versions": {
            "qpreduce": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "outputs": sorted(files) + (["H.npz", "H1.npz"] if dump_operators else []),
    }
    files["manifest.json"] = _dump_json(manifest)
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        for stale in _OUTPUT_NAMES - set(files):
            (out / stale).unlink(missing_ok=True)
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8")
    return PipelineResult(exit_code=code, summary=_jsonable(summary), files=files, error=error, objects=objects)


_OUTPUT_NAMES = {
    "summary.json", "error.json", "manifest.json", "kam_trace.csv", "spectrum.csv", "norms.csv", "deviation.csv",
}


# --- sweeps -------------------------------------------------------------------

SWEEP_AXES = ("eps", "gamma", "j-window", "omega-samples")


def sweep(cfg: ExperimentConfig, axis: str, values, outdir=None, simulate: bool = False, n_samples: int = 100_000):
    """Run one row per axis value; failures are recorded and the sweep continues.

    Returns ``(csv_text, summary)``.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("sweep axis has no values")
    h = cfg.hash()
    rows = []
    summary: dict = {"axis": axis, "config_hash": h}
    if axis == "eps":
        header = ["eps", "exit_code", "kam_steps", "final_residual", "shift_exponent", "mean_shift_over_eps", "max_deviation"]
        ratios = []
        for v in values:
            c = cfg.with_overrides([f"eps={float(v)!r}"])
            sub = None if outdir is None else Path(outdir) / f"eps_{float(v):g}"
            r = run_pipeline(c, sub, simulate=simulate)
            kam = r.summary.get("kam", {})
            ratio = ""
            if "kam" in r.objects and float(v) != 0:
                basis = r.objects["basis"]
                N = basis.n_modes
                sl = slice(10, int(0.8 * N))
                ratio = float(np.mean(np.abs(r.objects["kam"].lambda_inf[sl] - basis.eigenvalues[sl]) / abs(float(v))))
                ratios.append(ratio)
            rows.append(
                [
                    float(v),
                    int(r.exit_code),
                    kam.get("steps", ""),
                    kam.get("final_residual", ""),
                    r.summary.get("shift_exponent", ""),
                    ratio,
                    r.summary.get("simulation", {}).get("max_deviation", ""),
                ]
            )
        if ratios:
            summary["shift_over_eps_spread"] = (max(ratios) - min(ratios)) / float(np.mean(ratios))
    elif axis == "gamma":
        header = ["gamma", "excluded_fraction"]
        K = int(cfg.raw["diophantine"]["K"])
        fr = [measure_estimate(float(v), cfg.tau, cfg.n_freq, K, n_samples, cfg.seed) for v in values]
        rows = [[float(v), f] for v, f in zip(values, fr)]
        slope, r2 = fit_through_origin([float(v) for v in values], fr)
        summary.update(slope=slope, r2=r2, n_samples=n_samples)
    elif axis == "j-window":
        header = ["j_min", "j_max", "shift_exponent"]
        r = run_pipeline(cfg, None, simulate=False)
        if "kam" not in r.objects:
            rows = [[str(v), "", "failed"] for v in values]
        else:
            lam_inf = r.objects["kam"].lambda_inf
            lam_v = r.objects["basis"].eigenvalues
            for v in values:
                lo, hi = (int(a) for a in str(v).split(":"))
                try:
                    rows.append([lo, hi, shift_exponent(lam_inf, lam_v, lo, hi)[0]])
                except ValueError as err:
                    rows.append([lo, hi, f"error: {err}"])
    else:
        header = ["index", "omega", "certified", "gamma_max", "exit_code", "kam_steps"]
        if len(values) == 1 and float(values[0]).is_integer():
            rng = np.random.default_rng(cfg.seed)
            omegas = rng.uniform(1.0, 2.0, size=(int(values[0]), cfg.n_freq))
        else:
            omegas = [np.asarray([float(a) for a in str(v).split(",")]) for v in values]
        K = int(cfg.raw["diophantine"]["K"])
        for i, w in enumerate(omegas):
            cert = check_diophantine(w, cfg.gamma, cfg.tau, K)
            wl = "[" + ",".join(repr(float(a)) for a in w) + "]"
            try:
                c = cfg.with_overrides([f"omega={wl}"])
                r = run_pipeline(c, None, simulate=False)
                rows.append([i, " ".join(repr(float(a)) for a in w), cert.certified, cert.gamma_max, int(r.exit_code), r.summary.get("kam", {}).get("steps", "")])
            except ValueError as err:
                rows.append([i, " ".join(repr(float(a)) for a in w), cert.certified, cert.gamma_max, int(ExitCode.USAGE), str(err)])
    text = _csv(header, rows, h)
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep_{axis}.csv").write_text(text, encoding="utf-8")
        (out / f"sweep_{axis}.json").write_text(_dump_json(summary), encoding="utf-8")
    return text, _jsonable(summary)
