"""Command line interface.

Four subcommands over a JSON problem config:

    analyze     stability verdict (exit 0 when MSS, 3 when not)
    simulate    Monte Carlo ensemble, optional CSV and JSON report
    trajectory  deterministic covariance recursion, optional CSV
    compare     both interpretations, analysis plus paired simulations
                (exit 4 when the paired runs disagree)

Exit codes: 0 success/MSS/agreement, 3 not MSS, 4 comparison
disagreement, 64 usage, 65 bad configuration, 66 I/O failure,
1 any other library error.  Command line flags override config values.
CSV output uses repr floats (shortest round trip) and is downsampled to
at most 2000 rows with the final time always kept, so reruns are byte
identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys

import numpy as np

from .analysis import AnalysisOptions, analyze, covariance_trajectory
from .config import ProblemConfig, load_config, validate_report
from .errors import (
    ConfigError,
    MsslabError,
    NonFinite,
    RealizationRequired,
)
from .loopgain import equivalent_ito_system
from .simulate import SimulationConfig, run_ensemble

_MAX_CSV_ROWS = 2000

EXIT_OK = 0
EXIT_NOT_MSS = 3
EXIT_DISAGREE = 4
EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_IO = 66


class _Parser(argparse.ArgumentParser):
    # BSD sysexits usage code instead of argparse's default 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _num(value) -> float | None:
    value = float(value)
    return value if math.isfinite(value) else None


def _matrix(value) -> list[list[float]]:
    return [[float(x) for x in row] for row in np.atleast_2d(value)]


def _downsample_indices(length: int) -> list[int]:
    stride = -(-length // (_MAX_CSV_ROWS - 1))
    idx = list(range(0, length, stride))
    if idx[-1] != length - 1:
        idx.append(length - 1)
    return idx


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_report(path: str, report: dict) -> None:
    validate_report(report)
    text = json.dumps(report, sort_keys=True, indent=2, allow_nan=False)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text + "\n")


def _analysis_report(verdict) -> dict:
    steady = None
    if verdict.steady_state is not None:
        ss = verdict.steady_state
        steady = {
            "u_bar": _matrix(ss.u_bar),
            "r_bar": _matrix(ss.r_bar),
            "y_bar": _matrix(ss.y_bar),
            "trace_u_bar": float(np.trace(ss.u_bar)),
            "trace_y_bar": float(np.trace(ss.y_bar)),
        }
    return {
        "kind": "analysis",
        "interpretation": verdict.interpretation,
        "mss": verdict.mss,
        "h2_finite": verdict.h2_finite,
        "h2_squared": _num(verdict.h2_squared),
        "rho": _num(verdict.rho),
        "power_iterations": verdict.spectral.iterations,
        "power_converged": verdict.spectral.converged,
        "flags": list(verdict.flags),
        "steady_state": steady,
    }


def _verdict_summary(verdict) -> dict:
    trace = None
    if verdict.steady_state is not None:
        trace = float(np.trace(verdict.steady_state.y_bar))
    return {
        "mss": verdict.mss,
        "h2_finite": verdict.h2_finite,
        "h2_squared": _num(verdict.h2_squared),
        "rho": _num(verdict.rho),
        "trace_y_bar": trace,
    }


def _ensemble_summary(ensemble) -> dict:
    return {
        "terminal_var_y": _num(ensemble.var_y[-1]),
        "terminal_stderr_y": _num(ensemble.stderr_y[-1]),
        "terminal_n_diverged": int(ensemble.n_diverged[-1]),
    }


def _print_verdict(verdict) -> None:
    h2 = "infinite" if not verdict.h2_finite else repr(float(verdict.h2_squared))
    conv = "converged" if verdict.spectral.converged else "NOT converged"
    print(f"interpretation:        {verdict.interpretation}")
    print(f"forward block |H|_2^2: {h2}")
    print(
        f"loop gain rho:         {verdict.rho!r} "
        f"({verdict.spectral.iterations} power iterations, {conv})"
    )
    if verdict.flags:
        print(f"flags:                 {', '.join(verdict.flags)}")
    print(f"mean-square stable:    {'yes' if verdict.mss else 'no'}")
    if verdict.steady_state is not None:
        print(
            "steady state traces:   "
            f"u={float(np.trace(verdict.steady_state.u_bar))!r} "
            f"y={float(np.trace(verdict.steady_state.y_bar))!r}"
        )


def _analysis_options(cfg: ProblemConfig, args) -> AnalysisOptions:
    options = cfg.analysis
    overrides = {}
    if args.power_tol is not None:
        overrides["power_tol"] = args.power_tol
    if args.power_max_iter is not None:
        overrides["power_max_iter"] = args.power_max_iter
    if getattr(args, "quad_horizon", None) is not None:
        overrides["quad_horizon"] = args.quad_horizon
    if getattr(args, "quad_dt", None) is not None:
        overrides["quad_dt"] = args.quad_dt
    if overrides:
        try:
            options = dataclasses.replace(options, **overrides)
        except ValueError as err:
            raise ConfigError("analysis", str(err)) from err
    return options


def _simulation_config(cfg: ProblemConfig, args, need_paths=True) -> SimulationConfig:
    base = cfg.simulation

    def pick(flag, attr, field):
        if flag is not None:
            return flag
        if base is not None:
            return getattr(base, attr)
        raise ConfigError(
            f"simulation.{field}",
            f"required: set it in the config or pass --{field.replace('_', '-')}",
        )

    dt = pick(args.dt, "dt", "dt")
    horizon = pick(args.horizon, "horizon", "horizon")
    if need_paths:
        n_paths = pick(args.n_paths, "n_paths", "n_paths")
        seed = pick(args.seed, "seed", "seed")
    else:
        n_paths, seed = 1, 0
    scheme = args.scheme if args.scheme is not None else (
        base.scheme if base is not None else "state_space_step"
    )
    interpretation = (
        args.interpretation
        if getattr(args, "interpretation", None) is not None
        else cfg.interpretation
    )
    try:
        return SimulationConfig(
            dt=dt,
            horizon=horizon,
            n_paths=n_paths,
            seed=seed,
            interpretation=interpretation,
            scheme=scheme,
        )
    except (MsslabError, ValueError) as err:
        raise ConfigError("simulation", str(err)) from err


def _cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    interpretation = (
        args.interpretation if args.interpretation else cfg.interpretation
    )
    verdict = analyze(
        cfg.system, cfg.noise, interpretation, _analysis_options(cfg, args)
    )
    _print_verdict(verdict)
    if args.out:
        _write_report(args.out, _analysis_report(verdict))
    return EXIT_OK if verdict.mss else EXIT_NOT_MSS


def _predicted_trace(cfg, sim_config):
    try:
        predicted = covariance_trajectory(
            cfg.system,
            cfg.noise,
            sim_config.interpretation,
            horizon=sim_config.horizon,
            dt=sim_config.dt,
        )
    except NonFinite:
        return None
    return predicted.trace_y


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim_config = _simulation_config(cfg, args)
    ensemble = run_ensemble(cfg.system, cfg.noise, sim_config)
    predicted = _predicted_trace(cfg, sim_config)
    terminal_pred = None if predicted is None else _num(predicted[-1])
    print(
        f"simulated {sim_config.n_paths} paths, {sim_config.n_steps} steps "
        f"of dt={sim_config.dt!r} ({sim_config.interpretation}, "
        f"{sim_config.scheme})"
    )
    var_terminal = _num(ensemble.var_y[-1])
    err_terminal = _num(ensemble.stderr_y[-1])
    print(
        f"var_y({sim_config.horizon!r}) = {var_terminal!r} "
        f"+- {err_terminal!r}, predicted {terminal_pred!r}, "
        f"{int(ensemble.n_diverged[-1])} diverged"
    )
    if args.csv:
        idx = _downsample_indices(len(ensemble.times))
        rows = [
            [
                _cell(ensemble.times[k]),
                _cell(ensemble.var_y[k] if math.isfinite(ensemble.var_y[k]) else None),
                _cell(
                    ensemble.stderr_y[k]
                    if math.isfinite(ensemble.stderr_y[k])
                    else None
                ),
                _cell(None if predicted is None else predicted[k]),
                str(int(ensemble.n_diverged[k])),
            ]
            for k in idx
        ]
        _write_csv(
            args.csv,
            ["t", "var_y_empirical", "stderr_y", "var_y_predicted", "n_diverged"],
            rows,
        )
    if args.out:
        report = {
            "kind": "simulation",
            "interpretation": sim_config.interpretation,
            "scheme": sim_config.scheme,
            "dt": sim_config.dt,
            "horizon": sim_config.horizon,
            "n_paths": sim_config.n_paths,
            "seed": sim_config.seed,
            "terminal_time": float(ensemble.times[-1]),
            "terminal_var_y": var_terminal,
            "terminal_stderr_y": err_terminal,
            "terminal_n_diverged": int(ensemble.n_diverged[-1]),
            "predicted_terminal_var_y": terminal_pred,
            "csv": args.csv,
        }
        _write_report(args.out, report)
    return EXIT_OK


def _cmd_trajectory(args) -> int:
    cfg = load_config(args.config)
    sim_config = _simulation_config(cfg, args, need_paths=False)
    try:
        traj = covariance_trajectory(
            cfg.system,
            cfg.noise,
            sim_config.interpretation,
            horizon=sim_config.horizon,
            dt=sim_config.dt,
        )
    except NonFinite as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    trace_u = traj.trace_u
    trace_r = np.trace(traj.r, axis1=1, axis2=2)
    trace_y = traj.trace_y
    print(
        f"covariance recursion over {len(traj.times) - 1} steps "
        f"({sim_config.interpretation})"
    )
    print(
        f"terminal traces: u={float(trace_u[-1])!r} r={float(trace_r[-1])!r} "
        f"y={float(trace_y[-1])!r}"
    )
    if args.csv:
        idx = _downsample_indices(len(traj.times))
        rows = [
            [
                _cell(traj.times[k]),
                _cell(trace_u[k]),
                _cell(trace_r[k]),
                _cell(trace_y[k]),
            ]
            for k in idx
        ]
        _write_csv(args.csv, ["t", "trace_u", "trace_r", "trace_y"], rows)
    if args.out:
        report = {
            "kind": "trajectory",
            "interpretation": sim_config.interpretation,
            "dt": sim_config.dt,
            "horizon": sim_config.horizon,
            "terminal_time": float(traj.times[-1]),
            "terminal_trace_u": _num(trace_u[-1]),
            "terminal_trace_r": _num(trace_r[-1]),
            "terminal_trace_y": _num(trace_y[-1]),
            "csv": args.csv,
        }
        _write_report(args.out, report)
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = load_config(args.config)
    sim_config = _simulation_config(cfg, args)
    verdict_ito = analyze(cfg.system, cfg.noise, "ito", cfg.analysis)
    verdict_strat = analyze(cfg.system, cfg.noise, "stratonovich", cfg.analysis)

    equivalent = equivalent_ito_system(cfg.system, cfg.noise.gamma_cov)
    config_ito = dataclasses.replace(sim_config, interpretation="ito")
    config_strat = dataclasses.replace(sim_config, interpretation="stratonovich")
    ens_ito = run_ensemble(equivalent, cfg.noise, config_ito)
    ens_strat = run_ensemble(cfg.system, cfg.noise, config_strat)

    v1, v2 = ens_ito.var_y[-1], ens_strat.var_y[-1]
    e1, e2 = ens_ito.stderr_y[-1], ens_strat.stderr_y[-1]
    difference = abs(v1 - v2)
    tolerance = 3.0 * math.hypot(e1, e2)
    agree = bool(
        math.isfinite(difference)
        and math.isfinite(tolerance)
        and difference <= tolerance
    )

    def fmt(v):
        return "n/a" if v is None else repr(float(v))

    print(
        f"analysis ito:          rho={verdict_ito.rho!r} "
        f"mss={'yes' if verdict_ito.mss else 'no'}"
    )
    print(
        f"analysis stratonovich: rho={verdict_strat.rho!r} "
        f"mss={'yes' if verdict_strat.mss else 'no'}"
    )
    print(
        f"simulated var_y({sim_config.horizon!r}): "
        f"equivalent-block ito {fmt(_num(v1))} +- {fmt(_num(e1))}, "
        f"stratonovich {fmt(_num(v2))} +- {fmt(_num(e2))}"
    )
    print(
        f"agreement: |diff|={fmt(_num(difference))} "
        f"tol={fmt(_num(tolerance))} -> {'agree' if agree else 'DISAGREE'}"
    )
    if args.out:
        report = {
            "kind": "comparison",
            "dt": sim_config.dt,
            "horizon": sim_config.horizon,
            "n_paths": sim_config.n_paths,
            "seed": sim_config.seed,
            "scheme": sim_config.scheme,
            "analysis_ito": _verdict_summary(verdict_ito),
            "analysis_stratonovich": _verdict_summary(verdict_strat),
            "simulation_ito_equivalent": _ensemble_summary(ens_ito),
            "simulation_stratonovich": _ensemble_summary(ens_strat),
            "agreement": {
                "difference": _num(difference),
                "tolerance": _num(tolerance),
                "agree": agree,
            },
        }
        _write_report(args.out, report)
    return EXIT_OK if agree else EXIT_DISAGREE


def _add_common(parser) -> None:
    parser.add_argument("config", help="path to a problem config (JSON)")
    parser.add_argument("--out", metavar="PATH", help="write a JSON report")


def _add_grid_flags(parser, with_paths=True) -> None:
    parser.add_argument("--dt", type=float, help="simulation step")
    parser.add_argument("--horizon", type=float, help="simulation horizon")
    if with_paths:
        parser.add_argument("--n-paths", type=int, help="ensemble size")
        parser.add_argument("--seed", type=int, help="base RNG seed")
    parser.add_argument(
        "--scheme",
        choices=["state_space_step", "convolution_sum"],
        help="discretization scheme",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="msslab",
        description=(
            "Mean-square stability analysis and simulation of LTI blocks "
            "in multiplicative white-noise feedback."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_analyze = sub.add_parser("analyze", help="stability verdict")
    _add_common(p_analyze)
    p_analyze.add_argument(
        "--interpretation", choices=["ito", "stratonovich"], default=None
    )
    p_analyze.add_argument("--power-tol", type=float, default=None)
    p_analyze.add_argument("--power-max-iter", type=int, default=None)
    p_analyze.add_argument("--quad-horizon", type=float, default=None)
    p_analyze.add_argument("--quad-dt", type=float, default=None)
    p_analyze.set_defaults(handler=_cmd_analyze)

    p_simulate = sub.add_parser("simulate", help="Monte Carlo ensemble")
    _add_common(p_simulate)
    p_simulate.add_argument(
        "--interpretation", choices=["ito", "stratonovich"], default=None
    )
    _add_grid_flags(p_simulate)
    p_simulate.add_argument("--csv", metavar="PATH", help="write a CSV table")
    p_simulate.set_defaults(handler=_cmd_simulate)

    p_traj = sub.add_parser("trajectory", help="covariance recursion")
    _add_common(p_traj)
    p_traj.add_argument(
        "--interpretation", choices=["ito", "stratonovich"], default=None
    )
    _add_grid_flags(p_traj, with_paths=False)
    p_traj.add_argument("--csv", metavar="PATH", help="write a CSV table")
    p_traj.set_defaults(handler=_cmd_trajectory)

    p_compare = sub.add_parser(
        "compare", help="both interpretations, analysis and paired simulation"
    )
    _add_common(p_compare)
    _add_grid_flags(p_compare)
    p_compare.set_defaults(handler=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RealizationRequired as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    except MsslabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
