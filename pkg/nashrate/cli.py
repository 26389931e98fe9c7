from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from nashrate.config import settings
from nashrate.equilibrium import AssumptionError, construct_ne_from_kkt, extraneous_equilibria_probe, verify_equilibrium
from nashrate.pipeline import run, write_report
from nashrate.scenario import OVERRIDE_KEYS, Scenario, ScenarioError, apply_overrides, load_scenario
from nashrate.solver import SolverError, solve_cp
from nashrate.sweep import sweep


logger = logging.getLogger("nashrate.cli")


def _print_json(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _parse_grid(items: Sequence[str]) -> dict[str, list[Any]]:
    grid: dict[str, list[Any]] = {}
    for raw in items:
        key, sep, values = raw.partition("=")
        key = key.strip()
        if not sep or not values:
            raise ValueError(f"--grid expects KEY=V1,V2, got {raw!r}")
        if key not in OVERRIDE_KEYS:
            raise ValueError(f"unknown grid key {key!r}; expected one of {', '.join(OVERRIDE_KEYS)}")
        parsed: list[Any] = []
        for v in values.split(","):
            v = v.strip()
            if key in ("seed", "n_agents", "n_links"):
                parsed.append(int(v))
            elif key in ("eta", "zeta"):
                parsed.append(float(v))
            else:
                parsed.append(v)
        grid[key] = parsed
    return grid


def _scenario_from_args(args: argparse.Namespace) -> Scenario:
    scenario = load_scenario(args.scenario)
    overrides = {
        key: getattr(args, key)
        for key in ("mechanism", "eta", "zeta", "seed")
        if getattr(args, key, None) is not None
    }
    return apply_overrides(scenario, overrides)


def _cmd_validate(args: argparse.Namespace) -> int:
    scenario = _scenario_from_args(args)
    _print_json(
        {
            "name": scenario.name,
            "n_agents": scenario.network.n_agents,
            "n_links": scenario.network.n_links,
            "mechanism": scenario.mechanism,
            "seed": scenario.seed,
            "scenario_hash": scenario.scenario_hash(),
        }
    )
    return 0


def _cmd_solve(args: argparse.Namespace) -> int:
    scenario = _scenario_from_args(args)
    cert = solve_cp(scenario.network, scenario.valuations, scenario.solver)
    _print_json(cert.to_dict())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "certificate.json").write_text(json.dumps(cert.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return 0


def _cmd_equilibrium(args: argparse.Namespace) -> int:
    scenario = _scenario_from_args(args)
    spec = scenario.network
    cert = solve_cp(spec, scenario.valuations, scenario.solver)
    try:
        profile = construct_ne_from_kkt(spec, cert, scenario.mechanism, allocation=scenario.params.allocation)
    except AssumptionError as exc:
        _print_json({"status": "out_of_scope", "error": str(exc), "links": exc.links})
        return 2
    report = verify_equilibrium(
        spec,
        scenario.valuations,
        profile,
        scenario.params,
        scenario.mechanism,
        args.tol,
        epsilon=scenario.br.epsilon,
        deviation_samples=scenario.br.deviation_samples,
        rng=np.random.default_rng(scenario.seed),
    )
    _print_json(report.to_dict(spec))
    return 0 if report.status == "equilibrium" else 1


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _scenario_from_args(args)
    report = run(scenario, tol=args.tol)
    if args.out:
        write_report(report, args.out)
    summary = report.summary_row()
    summary["status"] = report.status
    summary["error"] = report.error
    _print_json(summary)
    return report.exit_code


def _cmd_sweep(args: argparse.Namespace) -> int:
    scenario = _scenario_from_args(args)
    grid = _parse_grid(args.grid)
    out = args.out or settings.OUT_DIR
    result = sweep(scenario, grid, out, tol=args.tol)
    for job in result.jobs:
        status = (job.result or {}).get("status", job.status)
        sys.stdout.write(f"{job.job_id}: {status}" + (f" ({job.error})" if job.error else "") + "\n")
    sys.stdout.write(f"out_of_scope_rate: {result.out_of_scope_rate:.3f}\n")
    return 1 if result.any_failed else 0


def _cmd_probe(args: argparse.Namespace) -> int:
    scenario = _scenario_from_args(args)
    report = extraneous_equilibria_probe(scenario.network, scenario.valuations, scenario.params, tol=args.tol)
    _print_json(report.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nashrate", description="Rate-allocation mechanisms: solve, construct and audit equilibria.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", required=True, help="Path to a scenario JSON file.")
        p.add_argument("--mechanism", choices=["wbb", "sbb"], default=None)
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--zeta", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="Output directory.")
        p.add_argument("--tol", type=float, default=None, help="Verification tolerance.")

    handlers = {
        "validate": (_cmd_validate, "Load and validate a scenario."),
        "solve": (_cmd_solve, "Solve the centralized problem and print the KKT certificate."),
        "equilibrium": (_cmd_equilibrium, "Construct the equilibrium from the certificate and verify it."),
        "run": (_cmd_run, "Run the full pipeline and write report.json / trace.csv."),
        "sweep": (_cmd_sweep, "Run a grid of overrides and write summary.csv."),
        "probe": (_cmd_probe, "Compare single-active profiles under the pure and corrected allocation maps."),
    }
    for name, (handler, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        common(p)
        if name == "sweep":
            p.add_argument(
                "--grid",
                action="append",
                default=[],
                metavar="KEY=V1,V2",
                help=f"Override grid, repeatable. Keys: {', '.join(OVERRIDE_KEYS)}.",
            )
        p.set_defaults(handler=handler)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.handler(args))
    except ScenarioError as exc:
        logger.debug("scenario rejected: %s", exc)
        for problem in exc.problems:
            sys.stderr.write(f"scenario error: {problem}\n")
        return 1
    except SolverError as exc:
        logger.debug("solver failed: %s", exc)
        sys.stderr.write(f"solver error: {exc} residuals={exc.residuals.to_dict()}\n")
        return 1
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
