from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from nashrate.config import settings
from nashrate.dynamics import iterate_best_response, perturb_profile
from nashrate.equilibrium import (
    A4_THRESHOLD,
    EquilibriumReport,
    EtaCertificate,
    EtaCertificationError,
    construct_ne_from_kkt,
    validate_eta,
    verify_equilibrium,
)
from nashrate.network import a4_holds
from nashrate.scenario import Scenario
from nashrate.solver import KktCertificate, SolverError, solve_cp
from nashrate.types import CheckResult, RunStatus, check


logger = logging.getLogger("nashrate.pipeline")

ALLOCATION_GAP_TOL = 1e-5
BUDGET_TOL = 1e-10

# bounds for the constructed equilibrium; checks not listed keep their own tolerance
CONSTRUCTED_BOUNDS = {
    "primal_feasibility": 1e-12,
    "equal_prices": 0.0,
    "dual_feasibility": 0.0,
    "comp_slackness": 1e-8,
    "stationarity": 1e-7,
    "individual_rationality": 1e-10,
    "wbb": BUDGET_TOL,
    "sbb": BUDGET_TOL,
    "rho_agreement": 1e-8,
}

SUMMARY_COLUMNS = ["scenario_id", "mechanism", "x_gap_inf", "budget_residual", "max_deviation_gain", "br_rounds"]


@dataclass
class RunReport:
    scenario: str
    scenario_hash: str
    seed: int
    mechanism: str
    status: RunStatus
    certificate: Optional[KktCertificate] = None
    eta: Optional[EtaCertificate] = None
    constructed: Optional[EquilibriumReport] = None
    dynamics: list[EquilibriumReport] = field(default_factory=list)
    properties: list[CheckResult] = field(default_factory=list)
    a4_links: list[int] = field(default_factory=list)
    error: Optional[str] = None
    timing: dict[str, float] = field(default_factory=dict)
    network: Any = None

    @property
    def exit_code(self) -> int:
        if self.status == "passed":
            return 0
        if self.status == "out_of_scope":
            return 2
        return 1

    def x_gap(self) -> Optional[float]:
        if self.certificate is None or self.constructed is None:
            return None
        gaps = [float(np.max(np.abs(self.constructed.allocation - self.certificate.x_star)))]
        for rep in self.dynamics:
            if rep.status == "equilibrium":
                gaps.append(float(np.max(np.abs(rep.allocation - self.certificate.x_star))))
        return max(gaps)

    def budget_residual(self) -> Optional[float]:
        return None if self.constructed is None else self.constructed.outcome.budget_residual

    def max_deviation_gain(self) -> Optional[float]:
        reps = ([self.constructed] if self.constructed is not None else []) + self.dynamics
        gains = [rep.deviation_gain for rep in reps if rep.deviation is not None]
        return max(gains) if gains else None

    def br_rounds(self) -> int:
        return max((rep.rounds for rep in self.dynamics), default=0)

    def summary_row(self, scenario_id: Optional[str] = None) -> dict[str, Any]:
        return {
            "scenario_id": scenario_id or self.scenario,
            "mechanism": self.mechanism,
            "x_gap_inf": self.x_gap(),
            "budget_residual": self.budget_residual(),
            "max_deviation_gain": self.max_deviation_gain(),
            "br_rounds": self.br_rounds(),
        }

    def to_dict(self) -> dict[str, Any]:
        spec = self.network
        return {
            "scenario": self.scenario,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "mechanism": self.mechanism,
            "status": self.status,
            "exit_code": self.exit_code,
            "error": self.error,
            "a4_links": self.a4_links,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "eta_certificate": None if self.eta is None else self.eta.to_dict(),
            "constructed": None if self.constructed is None else self.constructed.to_dict(spec),
            "dynamics": [rep.to_dict(spec) for rep in self.dynamics],
            "properties": [p.to_dict() for p in self.properties],
            "figures": {
                "x_gap_inf": self.x_gap(),
                "budget_residual": self.budget_residual(),
                "seller_revenue": None if self.constructed is None else self.constructed.outcome.revenue,
                "max_deviation_gain": self.max_deviation_gain(),
                "br_rounds": self.br_rounds(),
            },
            "timing": self.timing,
        }

    def to_json(self, *, with_timing: bool = True) -> str:
        payload = self.to_dict()
        if not with_timing:
            payload.pop("timing")
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _assert_properties(report: RunReport, scenario: Scenario) -> list[CheckResult]:
    assert report.certificate is not None and report.constructed is not None
    cert = report.certificate
    ne = report.constructed
    props = [check("kkt_certificate", cert.residuals.max(), scenario.solver.tolerance)]
    props += [
        check(f"constructed.{name}", c.residual, CONSTRUCTED_BOUNDS.get(name, c.tolerance))
        for name, c in sorted(ne.checks.items())
    ]
    gap = float(np.max(np.abs(ne.allocation - cert.x_star)))
    props.append(check("constructed.allocation_gap", gap, ALLOCATION_GAP_TOL))
    props.append(check("constructed.deviation_gain", max(ne.deviation_gain, 0.0), scenario.br.epsilon))
    if scenario.mechanism == "sbb":
        props.append(check("constructed.budget_balance", abs(ne.outcome.budget_residual), BUDGET_TOL))
    else:
        props.append(check("constructed.seller_revenue", max(0.0, -ne.outcome.revenue), BUDGET_TOL))
    for k, rep in enumerate(report.dynamics):
        if rep.status != "equilibrium":
            continue
        gap = float(np.max(np.abs(rep.allocation - cert.x_star)))
        props.append(check(f"dynamics[{k}].allocation_gap", gap, ALLOCATION_GAP_TOL))
    return props


def run(scenario: Scenario, *, tol: Optional[float] = None) -> RunReport:
    tol = settings.VERIFY_TOLERANCE if tol is None else tol
    spec, valuations = scenario.network, scenario.valuations
    rng = np.random.default_rng(scenario.seed)
    report = RunReport(
        scenario=scenario.name,
        scenario_hash=scenario.scenario_hash(),
        seed=scenario.seed,
        mechanism=scenario.mechanism,
        status="failed",
        network=spec,
    )
    started = time.perf_counter()

    try:
        report.certificate = solve_cp(spec, valuations, scenario.solver)
    except SolverError as exc:
        report.error = str(exc)
        report.timing["total_s"] = time.perf_counter() - started
        logger.warning("run %s failed: %s", scenario.name, exc)
        return report
    report.timing["solve_s"] = time.perf_counter() - started

    holds, bad = a4_holds(spec, report.certificate.x_star, A4_THRESHOLD)
    if not holds:
        report.status = "out_of_scope"
        report.a4_links = bad
        report.error = "A4 not satisfied; construction out of scope"
        report.timing["total_s"] = time.perf_counter() - started
        logger.warning("run %s out of scope: links %s carry fewer than two positive rates", scenario.name, bad)
        return report

    try:
        report.eta = validate_eta(spec, valuations, report.certificate, scenario.params, scenario.mechanism)
    except EtaCertificationError as exc:
        report.error = str(exc)
        report.timing["total_s"] = time.perf_counter() - started
        logger.warning("run %s failed: %s", scenario.name, exc)
        return report
    params = report.eta.params

    profile = construct_ne_from_kkt(spec, report.certificate, scenario.mechanism, allocation=params.allocation)
    br = scenario.br
    report.constructed = verify_equilibrium(
        spec,
        valuations,
        profile,
        params,
        scenario.mechanism,
        tol,
        epsilon=br.epsilon,
        deviation_samples=br.deviation_samples,
        rng=rng,
    )
    report.timing["construct_s"] = time.perf_counter() - started

    for k in range(br.perturbed_starts):
        init = perturb_profile(spec, profile, rng, br.perturb_scale, br.price_jitter)
        rep = iterate_best_response(spec, valuations, init, params, scenario.mechanism, br, rng, tol)
        logger.info("dynamics start %d: status=%s rounds=%d", k, rep.status, rep.rounds)
        report.dynamics.append(rep)
    report.timing["total_s"] = time.perf_counter() - started

    report.properties = _assert_properties(report, scenario)
    failed = [p.name for p in report.properties if not p.passed]
    report.status = "passed" if not failed else "failed"
    if failed:
        report.error = "failed properties: " + ", ".join(failed)
    logger.info("run %s finished: %s in %.2fs", scenario.name, report.status, report.timing["total_s"])
    return report


def write_trace(report: RunReport, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = report.network.n_agents if report.network is not None else 0
    columns = ["start", "round", "max_change", "welfare", "tax_total"] + [f"x{i}" for i in range(n)]
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for k, rep in enumerate(report.dynamics):
            for row in rep.trace:
                writer.writerow({"start": k, **row.to_dict()})
    return out


def write_report(report: RunReport, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json(), encoding="utf-8")
    write_trace(report, out / "trace.csv")
    logger.info("report written: %s", path)
    return path


def write_summary(rows: list[dict[str, Any]], path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return out
