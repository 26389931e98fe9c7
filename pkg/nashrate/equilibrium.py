from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from nashrate.config import settings
from nashrate.gradients import Params, agent_utility, hessian, mechanism_outcome, utility_gradient
from nashrate.messages import MessageProfile, agent_vector, make_profile, with_agent_vector
from nashrate.network import NetworkSpec, ValuationProfile, a4_violations, link_loads
from nashrate.sbb import SbbParams
from nashrate.solver import KktCertificate
from nashrate.types import AllocationRule, CheckResult, EquilibriumStatus, MechanismKind, check
from nashrate.wbb import MechanismParams, Outcome, avg_prices_excluding, scale_and_allocate


logger = logging.getLogger("nashrate.equilibrium")

A4_THRESHOLD = 1e-9
DEVIATION_RADII = (1e-3, 1e-2, 0.1, 1.0)
DEMAND_SCALINGS = (1e-4, 1e-3, 1e-2, 0.1)
PRICE_CUTS = (1e-3, 1e-2, 0.1)


class AssumptionError(RuntimeError):
    def __init__(self, message: str, *, links: list[int]) -> None:
        super().__init__(message)
        self.links = links


class EtaCertificationError(RuntimeError):
    def __init__(self, message: str, *, attempts: list[EtaAttempt]) -> None:
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class DeviationCertificate:
    max_gain: float
    per_agent: tuple[float, ...]
    best_kind: tuple[str, ...]
    samples: int
    skipped: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_gain": self.max_gain,
            "per_agent": list(self.per_agent),
            "best_kind": list(self.best_kind),
            "samples": self.samples,
            "skipped": self.skipped,
        }


@dataclass(frozen=True)
class TraceRow:
    round: int
    max_change: float
    welfare: float
    tax_total: float
    allocation: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        row: dict[str, Any] = {
            "round": self.round,
            "max_change": self.max_change,
            "welfare": self.welfare,
            "tax_total": self.tax_total,
        }
        for i, v in enumerate(self.allocation):
            row[f"x{i}"] = v
        return row


@dataclass
class EquilibriumReport:
    status: EquilibriumStatus
    mechanism: MechanismKind
    profile: MessageProfile
    outcome: Outcome
    common_prices: Optional[np.ndarray]
    checks: dict[str, CheckResult]
    deviation: Optional[DeviationCertificate]
    rounds: int = 0
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def allocation(self) -> np.ndarray:
        return self.outcome.x

    @property
    def deviation_gain(self) -> float:
        return 0.0 if self.deviation is None else self.deviation.max_gain

    def failed_checks(self) -> list[str]:
        return [name for name, c in self.checks.items() if not c.passed]

    def to_dict(self, spec: NetworkSpec) -> dict[str, Any]:
        return {
            "status": self.status,
            "mechanism": self.mechanism,
            "profile": self.profile.to_dict(spec),
            "outcome": self.outcome.to_dict(),
            "common_prices": None if self.common_prices is None else [float(v) for v in self.common_prices],
            "checks": {name: c.to_dict() for name, c in sorted(self.checks.items())},
            "deviation": None if self.deviation is None else self.deviation.to_dict(),
            "rounds": self.rounds,
        }


@dataclass(frozen=True)
class EtaAttempt:
    eta: float
    zeta: Optional[float]
    right_max_eig: tuple[float, ...]
    left_max_eig: tuple[Optional[float], ...]
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "eta": self.eta,
            "zeta": self.zeta,
            "right_max_eig": list(self.right_max_eig),
            "left_max_eig": list(self.left_max_eig),
            "passed": self.passed,
        }


@dataclass(frozen=True)
class EtaCertificate:
    params: Params
    attempts: tuple[EtaAttempt, ...]
    price_diagonal_error: float

    @property
    def shrinks(self) -> int:
        return len(self.attempts) - 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "eta": self.params.eta,
            "zeta": getattr(self.params, "zeta", None),
            "shrinks": self.shrinks,
            "price_diagonal_error": self.price_diagonal_error,
            "attempts": [a.to_dict() for a in self.attempts],
        }


def construct_ne_from_kkt(
    spec: NetworkSpec,
    certificate: KktCertificate,
    mechanism: MechanismKind,
    *,
    scale: float = 1.0,
    threshold: float = A4_THRESHOLD,
    allocation: AllocationRule = "corrected",
) -> MessageProfile:
    bad = a4_violations(spec, certificate.x_star, threshold)
    if bad:
        raise AssumptionError("A4 not satisfied; construction out of scope", links=bad)
    if not scale > 0:
        raise ValueError("demand scale must be positive")
    y = scale * np.asarray(certificate.x_star, dtype=float)
    rho = None
    if mechanism == "sbb":
        r, _, _ = scale_and_allocate(spec, y, allocation)
        rho = np.full(spec.n_agents, r)
    profile = make_profile(spec, y, certificate.lambda_star, rho)
    logger.info("constructed %s equilibrium profile (scale=%g)", mechanism, scale)
    return profile


def _common_prices(spec: NetworkSpec, prices: np.ndarray) -> tuple[np.ndarray, float]:
    mask = spec.route_mask
    spread = np.array(
        [float(np.ptp(prices[l, list(spec.members[l])])) if spec.members[l] else 0.0 for l in range(spec.n_links)]
    )
    common = np.sum(np.where(mask, prices, 0.0), axis=1) / np.maximum(mask.sum(axis=1), 1)
    return common, float(np.max(spread, initial=0.0))


def equilibrium_checks(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    outcome: Outcome,
    mechanism: MechanismKind,
    tol: float,
) -> tuple[dict[str, CheckResult], np.ndarray]:
    x = outcome.x
    common, spread = _common_prices(spec, profile.prices)
    excess = link_loads(spec, x) - spec.capacity

    marginal = valuations.d1s(x)
    price_sum = spec.alpha.T @ common
    gap = np.where(x > 0, np.abs(marginal - price_sum), np.maximum(0.0, marginal - price_sum))

    checks = {
        "primal_feasibility": check("primal_feasibility", max(float(np.max(excess, initial=0.0)), 0.0), tol),
        "equal_prices": check("equal_prices", spread, tol),
        "dual_feasibility": check("dual_feasibility", max(0.0, -float(np.min(profile.prices, initial=0.0))), tol),
        "comp_slackness": check("comp_slackness", float(np.max(np.abs(common * excess), initial=0.0)), tol),
        "stationarity": check("stationarity", float(np.max(gap, initial=0.0)), tol),
        "individual_rationality": check(
            "individual_rationality",
            max(0.0, float(np.max(valuations.values(np.zeros(spec.n_agents)) - outcome.u))),
            tol,
        ),
    }
    total = float(np.sum(outcome.t))
    if mechanism == "sbb":
        checks["sbb"] = check("sbb", abs(total), tol)
        assert profile.rho is not None
        checks["rho_agreement"] = check("rho_agreement", float(np.max(np.abs(profile.rho - outcome.r))), tol)
    else:
        checks["wbb"] = check("wbb", max(0.0, -total), tol)
    return checks, common


def _agent_deviations(
    spec: NetworkSpec,
    profile: MessageProfile,
    i: int,
    params: Params,
    mechanism: MechanismKind,
    rng: np.random.Generator,
    n_samples: int,
    tol: float,
) -> list[tuple[str, np.ndarray]]:
    s = agent_vector(spec, profile, i, mechanism)
    route = list(spec.routes[i])
    pbar = avg_prices_excluding(spec, profile.prices)[route, i]
    r, _, x = scale_and_allocate(spec, profile.y, params.allocation)
    slack = (spec.capacity - spec.alpha @ x)[route]

    def r_after(vec: np.ndarray) -> float:
        return scale_and_allocate(spec, with_agent_vector(spec, profile, i, vec, mechanism).y, params.allocation)[0]

    out: list[tuple[str, np.ndarray]] = []
    matched = s.copy()
    matched[1 : 1 + len(route)] = pbar
    out.append(("match_prices", matched))
    for k, _ in enumerate(route):
        one = s.copy()
        one[1 + k] = pbar[k]
        out.append(("match_price", one))
        if slack[k] > tol and pbar[k] > 0:
            for cut in PRICE_CUTS:
                lowered = s.copy()
                lowered[1 + k] = max(0.0, pbar[k] * (1.0 - cut))
                out.append(("lower_price", lowered))
    for delta in DEMAND_SCALINGS:
        for sgn in (1.0, -1.0):
            moved = s.copy()
            moved[0] = max(0.0, s[0] * (1.0 + sgn * delta)) if s[0] > 0 else delta
            out.append(("scale_demand", moved))
            if mechanism == "sbb":
                reset = moved.copy()
                reset[-1] = r_after(moved)
                out.append(("scale_demand_rho", reset))
    if mechanism == "sbb":
        agree = s.copy()
        agree[-1] = r
        out.append(("rho_agree", agree))
    out.append(("zero", np.zeros_like(s)))

    scale = np.maximum(1.0, np.abs(s))
    k = 0
    while len(out) < n_samples:
        radius = DEVIATION_RADII[k % len(DEVIATION_RADII)]
        k += 1
        cand = np.maximum(0.0, s + radius * scale * rng.uniform(-1.0, 1.0, size=s.shape))
        out.append((f"box_{radius:g}", cand))
    return out


def deviation_certificate(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: Params,
    mechanism: MechanismKind,
    *,
    n_samples: int,
    rng: np.random.Generator,
    tol: float = 1e-9,
) -> DeviationCertificate:
    base = mechanism_outcome(spec, valuations, profile, params, mechanism).u
    gains: list[float] = []
    kinds: list[str] = []
    total = 0
    skipped = 0
    for i in range(spec.n_agents):
        best, best_kind = -np.inf, ""
        for kind, vec in _agent_deviations(spec, profile, i, params, mechanism, rng, n_samples, tol):
            dev = with_agent_vector(spec, profile, i, vec, mechanism)
            try:
                u = agent_utility(spec, valuations, dev, i, params, mechanism)
            except ValueError as exc:
                skipped += 1
                logger.debug("deviation %s of agent %d skipped: %s", kind, i, exc)
                continue
            total += 1
            gain = u - float(base[i])
            if gain > best:
                best, best_kind = gain, kind
        gains.append(float(best))
        kinds.append(best_kind)
    cert = DeviationCertificate(
        max_gain=max(gains),
        per_agent=tuple(gains),
        best_kind=tuple(kinds),
        samples=total,
        skipped=skipped,
    )
    logger.debug("deviation certificate: max gain %.3g over %d samples, %d skipped", cert.max_gain, total, skipped)
    return cert


def verify_equilibrium(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: Params,
    mechanism: MechanismKind,
    tol: Optional[float] = None,
    *,
    epsilon: Optional[float] = None,
    deviation_samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> EquilibriumReport:
    tol = settings.VERIFY_TOLERANCE if tol is None else tol
    epsilon = settings.BR_EPSILON if epsilon is None else epsilon
    n_samples = settings.BR_DEVIATION_SAMPLES if deviation_samples is None else deviation_samples
    rng = rng or np.random.default_rng(0)

    outcome = mechanism_outcome(spec, valuations, profile, params, mechanism)
    checks, common = equilibrium_checks(spec, valuations, profile, outcome, mechanism, tol)
    deviation = None
    if n_samples > 0:
        deviation = deviation_certificate(
            spec, valuations, profile, params, mechanism, n_samples=n_samples, rng=rng
        )
    ok = all(c.passed for c in checks.values()) and (deviation is None or deviation.max_gain <= epsilon)
    status: EquilibriumStatus = "equilibrium" if ok else "not_equilibrium"
    report = EquilibriumReport(
        status=status,
        mechanism=mechanism,
        profile=profile,
        outcome=outcome,
        common_prices=common if checks["equal_prices"].passed else None,
        checks=checks,
        deviation=deviation,
    )
    if not ok:
        logger.info("profile is not an equilibrium: failed=%s gain=%.3g", report.failed_checks(), report.deviation_gain)
    return report


def _max_eig(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return -np.inf
    return float(np.max(np.linalg.eigvalsh(matrix)))


def _hessian_attempt(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: Params,
    mechanism: MechanismKind,
    margin: float,
) -> tuple[EtaAttempt, float]:
    right: list[float] = []
    left: list[Optional[float]] = []
    diag_err = 0.0
    for i in range(spec.n_agents):
        h_right = hessian(spec, valuations, profile, i, params, mechanism, "right")
        n_route = len(spec.routes[i])
        diag_err = max(diag_err, float(np.max(np.abs(np.diag(h_right)[1 : 1 + n_route] + 2.0))))
        if profile.y[i] > 0:
            right.append(_max_eig(h_right))
            h_left = hessian(spec, valuations, profile, i, params, mechanism, "left")
            left.append(_max_eig(h_left))
        else:
            right.append(_max_eig(h_right[1:, 1:]))
            left.append(None)
    worst = max([*right, *(v for v in left if v is not None)])
    attempt = EtaAttempt(
        eta=params.eta,
        zeta=getattr(params, "zeta", None),
        right_max_eig=tuple(right),
        left_max_eig=tuple(left),
        passed=worst <= -margin,
    )
    return attempt, diag_err


def validate_eta(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    certificate: KktCertificate,
    params: Params,
    mechanism: MechanismKind,
    *,
    max_shrinks: Optional[int] = None,
    margin: Optional[float] = None,
) -> EtaCertificate:
    max_shrinks = settings.ETA_MAX_SHRINKS if max_shrinks is None else max_shrinks
    margin = settings.HESSIAN_MARGIN if margin is None else margin
    attempts: list[EtaAttempt] = []
    current = params
    for attempt_no in range(max_shrinks + 1):
        profile = construct_ne_from_kkt(spec, certificate, mechanism, allocation=current.allocation)
        attempt, diag_err = _hessian_attempt(spec, valuations, profile, current, mechanism, margin)
        attempts.append(attempt)
        if attempt.passed:
            logger.info("eta certified: eta=%g shrinks=%d", current.eta, attempt_no)
            return EtaCertificate(params=current, attempts=tuple(attempts), price_diagonal_error=diag_err)
        logger.warning("hessian not negative definite at eta=%g; shrinking", current.eta)
        if isinstance(current, SbbParams):
            current = dataclasses.replace(current, eta=current.eta * 0.1, zeta=current.zeta * 0.1)
        else:
            current = dataclasses.replace(current, eta=current.eta * 0.1)
    worst = [max([*a.right_max_eig, *(v for v in a.left_max_eig if v is not None)]) for a in attempts]
    raise EtaCertificationError(
        f"no certified eta after {max_shrinks} shrinks; worst eigenvalues per attempt: {worst}",
        attempts=attempts,
    )


@dataclass(frozen=True)
class ProbeRow:
    agent: int
    demand: float
    x_pure: float
    x_corrected: float
    beta_pure: float
    beta_corrected: float
    foc_pure: float
    foc_corrected: float
    extraneous: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ProbeReport:
    rows: tuple[ProbeRow, ...]
    tolerance: float

    @property
    def extraneous_under_pure(self) -> int:
        return sum(1 for row in self.rows if row.foc_pure <= self.tolerance)

    @property
    def extraneous_under_corrected(self) -> int:
        return sum(1 for row in self.rows if row.foc_corrected <= self.tolerance)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tolerance": self.tolerance,
            "extraneous_under_pure": self.extraneous_under_pure,
            "extraneous_under_corrected": self.extraneous_under_corrected,
            "rows": [row.to_dict() for row in self.rows],
        }


def extraneous_equilibria_probe(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    params: MechanismParams,
    *,
    n_profiles: int = 10,
    demands: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0),
    tol: Optional[float] = None,
) -> ProbeReport:
    """Single-active profiles at zero prices under both allocation maps.

    Only the demand first-order condition is examined; quotes already
    agree so the price conditions hold trivially.
    """
    tol = settings.VERIFY_TOLERANCE if tol is None else tol
    pure = dataclasses.replace(params, allocation="pure")
    corrected = dataclasses.replace(params, allocation="corrected")
    rows: list[ProbeRow] = []
    k = 0
    while len(rows) < n_profiles:
        i = k % spec.n_agents
        demand = demands[(k // spec.n_agents) % len(demands)] * (1.0 + k // (spec.n_agents * len(demands)))
        k += 1
        y = np.zeros(spec.n_agents)
        y[i] = demand
        profile = make_profile(spec, y, 0.0)
        per_map = []
        for p in (pure, corrected):
            _, _, x = scale_and_allocate(spec, y, p.allocation)
            g = utility_gradient(spec, valuations, profile, i, p, "wbb")
            per_map.append((float(x[i]), g.right.beta(demand), abs(g.dy_right)))
        (xp, bp, fp), (xc, bc, fc) = per_map
        rows.append(
            ProbeRow(
                agent=i,
                demand=demand,
                x_pure=xp,
                x_corrected=xc,
                beta_pure=bp,
                beta_corrected=bc,
                foc_pure=fp,
                foc_corrected=fc,
                extraneous=bool(fp <= tol < fc),
            )
        )
    report = ProbeReport(rows=tuple(rows), tolerance=tol)
    logger.info(
        "extraneous probe: %d/%d pass first-order conditions under pure map, %d under corrected map",
        report.extraneous_under_pure,
        len(rows),
        report.extraneous_under_corrected,
    )
    return report
