"""Command-line entry point.

Subcommands: ``run`` a scenario, ``sweep`` a parameter, ``audit`` persisted
certificate records, ``verify-sdp`` a solver dump, and ``echo-config``.
Exit codes are a stable contract: 0 success, 1 configuration or user error,
2 numerical failure (partial outputs are still written where possible).
Progress goes to stderr; stdout carries machine-parseable one-line summaries.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import simkit
from .ambiguity import NominalStackedNoise
from .config import BUILTIN_TEMPLATES, load_config, load_template
from .errors import ConfigError, SdpConvergenceError
from .interior_point import solve_stage_sdp_ip
from .psdcore import PsdMatrix
from .stage_sdp import (
    SdpDiagnostics,
    StageSdpSolution,
    build_stage_problem,
    verify_solution,
)

log = logging.getLogger("drekf")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def _setup_logging(verbosity):
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s")


def _add_common(parser):
    parser.add_argument("--config", help="scenario config path")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument(
        "--override", action="append", default=[], metavar="K=V",
        help="dotted-key config override (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override scenario seed")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    parser.add_argument("-v", "--verbose", action="count", default=0)


def _load(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"scenario.seed={args.seed}")
    if args.config is None:
        raise ConfigError("--config", "a config path is required")
    return load_config(args.config, overrides)


class _SdpDumpSink:
    """Collects per-stage problem/solution records for offline audit."""

    def __init__(self):
        self.records = []

    def __call__(self, stage, problem, solution):
        rec = {
            "stage": stage,
            "is_initial": problem.is_initial,
            "c": problem.c_mat.tolist(),
            "nominal_mean": problem.nominal.mean.tolist(),
            "nominal_cov": problem.nominal.cov.values.tolist(),
            "split": problem.nominal.split,
            "radius": problem.radius,
            "lambda_floor": problem.lambda_floor,
            "solution": {
                "prior_cov": solution.prior_cov.tolist(),
                "posterior_cov": solution.posterior_cov.tolist(),
                "sigma_eps": solution.sigma_eps.tolist(),
                "coupling": solution.coupling.tolist(),
                "t_mat": solution.t_mat.tolist(),
                "s_mat": solution.s_mat.tolist(),
                "gain": solution.gain.tolist(),
                "objective": solution.objective,
                "iterations": solution.diagnostics.iterations,
                "gap_estimate": solution.diagnostics.gap_estimate,
            },
        }
        if not problem.is_initial:
            rec["a"] = problem.a_mat.tolist()
            rec["carried_posterior"] = problem.carried_posterior.values.tolist()
        self.records.append(rec)

    def write(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")


def _print_summary(summary, prefix=""):
    for name, entry in summary.estimators.items():
        parts = [
            f"estimator={name}",
            f"mse_mean={entry['mse_time_avg_mean']:.6g}",
            f"mse_std={entry['mse_time_avg_std']:.6g}",
        ]
        if "collision_rate" in entry:
            parts.append(f"collision_rate={entry['collision_rate']:.4g}")
            parts.append(f"goal_reach_rate={entry['goal_reach_rate']:.4g}")
        if summary.certificate_mode and name == "drekf":
            parts.append(f"cert_mode={summary.certificate_mode}")
            parts.append(f"cert_violations={summary.certificate_violations}")
        print(prefix + " ".join(parts))


def cmd_run(args):
    config = _load(args)
    sink = _SdpDumpSink() if args.dump_sdp else None
    os.makedirs(args.out, exist_ok=True)
    partial_exit = None
    try:
        if config.system_id == "ct":
            results = simkit.run_ct_benchmark(config, jobs=args.jobs, dump_sink=sink)
            summary, records = next(iter(results.values()))
        else:
            summary, records = simkit.run_safe_nav_benchmark(
                config, jobs=args.jobs, dump_sink=sink
            )
    except SdpConvergenceError as err:
        log.error("solver convergence failure: %s", err)
        return EXIT_NUMERIC
    simkit.persist(records, summary, args.out, config)
    if sink is not None:
        sink.write(os.path.join(args.out, "sdp_dump.jsonl"))
    _print_summary(summary)
    return partial_exit or EXIT_OK


def cmd_sweep(args):
    config = _load(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values", "sweep needs at least one value")
    os.makedirs(args.out, exist_ok=True)
    merged = []
    for value in values:
        log.info("sweep %s = %g", args.key, value)
        if args.key == "omega0":
            if config.system_id != "ct":
                raise ConfigError("--key", "omega0 sweep requires the ct system")
            results = simkit.run_ct_benchmark(config, [value], jobs=args.jobs)
            summary, records = results[value]
        elif args.key == "theta":
            data = json.loads(json.dumps(config.data))
            data.setdefault("robust", {})["theta"] = value
            cfg_v = load_config_from_data(data)
            if cfg_v.system_id == "ct":
                results = simkit.run_ct_benchmark(cfg_v, jobs=args.jobs)
                summary, records = next(iter(results.values()))
            else:
                summary, records = simkit.run_safe_nav_benchmark(cfg_v, jobs=args.jobs)
        else:
            raise ConfigError("--key", f"unsupported sweep key '{args.key}'")
        subdir = os.path.join(args.out, f"{args.key}_{value:g}")
        simkit.persist(records, summary, subdir, config)
        merged.append((value, summary))
        _print_summary(summary, prefix=f"{args.key}={value:g} ")

    lines = ["sweep_" + args.key + "," + ",".join(simkit.SUMMARY_COLUMNS)]
    for value, summary in merged:
        body = simkit._summary_csv(summary).splitlines()[1:]
        lines.extend(f"{value:.17g},{row}" for row in body)
    with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def load_config_from_data(data):
    from .config import ScenarioConfig

    return ScenarioConfig(data)


def cmd_audit(args):
    path = args.records or args.out
    try:
        records = simkit.load_records(path)
    except FileNotFoundError:
        log.error("no run records found under '%s'", path)
        return EXIT_CONFIG
    report = simkit.audit_certificates(records)
    if report["mode"] is None:
        print("certificate audit: no drekf records")
        return EXIT_OK
    print(f"certificate audit: mode={report['mode']} ({report['label']})")
    print(f"stages={len(report['stages'])} violations={len(report['violations'])}")
    for t, kind, emp, bound in report["violations"]:
        print(f"violation stage={t} kind={kind} empirical={emp:.6g} bound={bound:.6g}")
    return EXIT_OK


def _solution_from_record(rec):
    sol = rec["solution"]
    sigma_eps = np.array(sol["sigma_eps"])
    split = rec["split"]
    return StageSdpSolution(
        prior_cov=np.array(sol["prior_cov"]),
        posterior_cov=np.array(sol["posterior_cov"]),
        state_noise_cov=sigma_eps[:split, :split],
        meas_noise_cov=sigma_eps[split:, split:],
        cross_cov=sigma_eps[:split, split:],
        coupling=np.array(sol["coupling"]),
        t_mat=np.array(sol["t_mat"]),
        s_mat=np.array(sol["s_mat"]),
        gain=np.array(sol["gain"]),
        objective=sol["objective"],
        diagnostics=SdpDiagnostics(
            iterations=sol["iterations"],
            primal_residual=0.0,
            gap_estimate=sol["gap_estimate"],
        ),
        sigma_eps=sigma_eps,
    )


def cmd_verify_sdp(args):
    if not os.path.exists(args.dump):
        log.error("dump file '%s' not found", args.dump)
        return EXIT_CONFIG
    all_ok = True
    with open(args.dump) as fh:
        for line in fh:
            rec = json.loads(line)
            nominal = NominalStackedNoise(
                np.array(rec["nominal_mean"]),
                PsdMatrix.from_array(np.array(rec["nominal_cov"])),
                rec["split"],
            )
            problem = build_stage_problem(
                np.array(rec["a"]) if not rec["is_initial"] else None,
                np.array(rec["c"]),
                PsdMatrix.from_array(np.array(rec["carried_posterior"]))
                if not rec["is_initial"]
                else None,
                nominal,
                rec["radius"],
                rec["is_initial"],
            )
            solution = _solution_from_record(rec)
            report = verify_solution(problem, solution, tol=args.tol)
            status = "ok" if report.ok else "VIOLATION"
            print(f"stage {rec['stage']}: {status}")
            for entry in report.violations():
                print(f"  {entry.name}: residual={entry.residual:.3e} tol={entry.tol:.1e}")
                all_ok = False
            if args.cross_check and rec["radius"] > 0:
                ip = solve_stage_sdp_ip(problem)
                gap = abs(ip.objective - solution.objective) / max(
                    1.0, abs(ip.objective)
                )
                marker = "ok" if gap <= 1e-4 else "VIOLATION"
                print(f"  cross-check objective gap {gap:.3e} {marker}")
                if gap > 1e-4:
                    all_ok = False
    return EXIT_OK if all_ok else EXIT_NUMERIC


def cmd_echo_config(args):
    if args.template:
        config = load_template(args.template, args.override)
    else:
        config = _load(args)
    sys.stdout.write(config.echo())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="drekf",
        description="Distributionally robust EKF benchmarks and diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario")
    _add_common(p_run)
    p_run.add_argument(
        "--dump-sdp", action="store_true",
        help="dump run 0 stage problems/solutions for offline audit",
    )
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one parameter")
    _add_common(p_sweep)
    p_sweep.add_argument("--key", required=True, choices=["omega0", "theta"])
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_audit = sub.add_parser("audit", help="audit persisted certificate records")
    _add_common(p_audit)
    p_audit.add_argument("--records", help="runs.jsonl path or its directory")
    p_audit.set_defaults(func=cmd_audit)

    p_verify = sub.add_parser("verify-sdp", help="verify a solver dump")
    _add_common(p_verify)
    p_verify.add_argument("--dump", required=True, help="sdp_dump.jsonl path")
    p_verify.add_argument("--tol", type=float, default=1e-8)
    p_verify.add_argument(
        "--cross-check", action="store_true",
        help="re-solve each stage with the interior-point fallback",
    )
    p_verify.set_defaults(func=cmd_verify_sdp)

    p_echo = sub.add_parser("echo-config", help="print the parsed config")
    _add_common(p_echo)
    p_echo.add_argument("--template", choices=list(BUILTIN_TEMPLATES))
    p_echo.set_defaults(func=cmd_echo_config)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as err:
        log.error("%s", err)
        return EXIT_CONFIG
    except SdpConvergenceError as err:
        log.error("%s", err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
