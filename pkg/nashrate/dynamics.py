from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from nashrate.config import settings
from nashrate.equilibrium import EquilibriumReport, TraceRow, verify_equilibrium
from nashrate.gradients import Params, agent_utility, mechanism_outcome, utility_gradient
from nashrate.messages import MessageProfile, WbbMessage, agent_vector, with_agent_vector
from nashrate.network import NetworkSpec, ValuationProfile
from nashrate.types import BrOrder, MechanismKind
from nashrate.wbb import scale_and_allocate


logger = logging.getLogger("nashrate.game")

_ARMIJO_C = 1e-4
_MAX_BACKTRACKS = 50


@dataclass(frozen=True)
class BrConfig:
    epsilon: float = field(default_factory=lambda: settings.BR_EPSILON)
    max_rounds: int = field(default_factory=lambda: settings.BR_MAX_ROUNDS)
    inner_iterations: int = field(default_factory=lambda: settings.BR_INNER_ITERATIONS)
    profile_tol: float = field(default_factory=lambda: settings.BR_PROFILE_TOL)
    deviation_samples: int = field(default_factory=lambda: settings.BR_DEVIATION_SAMPLES)
    perturbed_starts: int = field(default_factory=lambda: settings.BR_PERTURBED_STARTS)
    order: BrOrder = "index"
    price_jitter: float = 0.0
    perturb_scale: float = 0.05
    improve_tol: float = 1e-12
    step_tol: float = 1e-13

    def __post_init__(self) -> None:
        if not (self.epsilon > 0 and self.profile_tol > 0 and self.perturb_scale > 0):
            raise ValueError("best-response tolerances must be positive")
        if self.max_rounds < 1 or self.inner_iterations < 1:
            raise ValueError("best-response iteration caps must be positive")
        if min(self.deviation_samples, self.perturbed_starts, self.price_jitter, self.improve_tol) < 0:
            raise ValueError("sample counts and jitter must be nonnegative")
        if self.order not in ("index", "shuffle"):
            raise ValueError(f"unknown agent order: {self.order}")


@dataclass(frozen=True)
class BestResponse:
    message: WbbMessage
    profile: MessageProfile
    utility: float
    gain: float


def _ascent_direction(g) -> np.ndarray:
    vec = g.vector("right")
    if g.drho is not None:
        vec[-1] = 0.0
    if g.dy_right > 0:
        vec[0] = g.dy_right
    elif g.dy_left is not None and g.dy_left < 0:
        vec[0] = g.dy_left
    else:
        vec[0] = 0.0
    return vec


def _settle_rho(
    spec: NetworkSpec,
    profile: MessageProfile,
    i: int,
    vec: np.ndarray,
    params: Params,
    mechanism: MechanismKind,
) -> np.ndarray:
    """Set rho_i to the scaling factor at the demand in vec.

    rho_i only enters agent i's own tax through zeta (rho_i - r)^2, so this is
    its exact best reply in rho.
    """
    if mechanism != "sbb":
        return vec
    y = profile.y.copy()
    y[i] = vec[0]
    out = vec.copy()
    out[-1] = scale_and_allocate(spec, y, params.allocation)[0]
    return out


def _ascend(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    i: int,
    start: np.ndarray,
    params: Params,
    mechanism: MechanismKind,
    config: BrConfig,
) -> tuple[np.ndarray, float]:
    def util(vec: np.ndarray) -> float:
        return agent_utility(spec, valuations, with_agent_vector(spec, profile, i, vec, mechanism), i, params, mechanism)

    s = _settle_rho(spec, profile, i, np.maximum(start, 0.0), params, mechanism)
    u = util(s)
    step = 1.0
    for _ in range(config.inner_iterations):
        g = utility_gradient(spec, valuations, with_agent_vector(spec, profile, i, s, mechanism), i, params, mechanism)
        d = _ascent_direction(g)
        moved = False
        t = step
        for _ in range(_MAX_BACKTRACKS):
            cand = _settle_rho(spec, profile, i, np.maximum(s + t * d, 0.0), params, mechanism)
            delta = cand - s
            if float(np.max(np.abs(delta), initial=0.0)) <= config.step_tol:
                break
            cu = util(cand)
            if cu >= u + _ARMIJO_C * float(d @ delta) and cu > u:
                s, u, moved = cand, cu, True
                break
            t *= 0.5
        if not moved:
            break
        step = min(2.0 * t, 1e6)
    return s, u


def best_response(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    i: int,
    params: Params,
    mechanism: MechanismKind,
    config: Optional[BrConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> BestResponse:
    config = config or BrConfig()
    rng = rng or np.random.default_rng(i)
    current = agent_vector(spec, profile, i, mechanism)
    base = agent_utility(spec, valuations, profile, i, params, mechanism)

    starts = [current, np.zeros_like(current)]
    jitter = 1.0 + config.perturb_scale * rng.uniform(-1.0, 1.0, size=current.shape)
    lifted = config.perturb_scale * (current == 0) * rng.uniform(0.0, 1.0, size=current.shape)
    starts.append(np.maximum(current * jitter, 0.0) + lifted)

    best_vec, best_u = current, base
    for k, start in enumerate(starts):
        try:
            vec, u = _ascend(spec, valuations, profile, i, start, params, mechanism, config)
        except ValueError as exc:
            logger.debug("start %d for agent %d skipped: %s", k, i, exc)
            continue
        # another start must beat the current one by improve_tol
        margin = 0.0 if k == 0 else config.improve_tol
        if u > best_u + margin:
            best_vec, best_u = vec, u

    new_profile = with_agent_vector(spec, profile, i, best_vec, mechanism)
    return BestResponse(
        message=new_profile.message(spec, i),
        profile=new_profile,
        utility=best_u,
        gain=best_u - base,
    )


def _trace_row(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: Params,
    mechanism: MechanismKind,
    round_no: int,
    change: float,
) -> TraceRow:
    out = mechanism_outcome(spec, valuations, profile, params, mechanism)
    return TraceRow(
        round=round_no,
        max_change=change,
        welfare=float(np.sum(valuations.values(out.x))),
        tax_total=float(np.sum(out.t)),
        allocation=tuple(float(v) for v in out.x),
    )


def iterate_best_response(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    init: MessageProfile,
    params: Params,
    mechanism: MechanismKind,
    config: Optional[BrConfig] = None,
    rng: Optional[np.random.Generator] = None,
    tol: Optional[float] = None,
) -> EquilibriumReport:
    config = config or BrConfig()
    rng = rng or np.random.default_rng(0)
    profile = init
    trace = [_trace_row(spec, valuations, profile, params, mechanism, 0, 0.0)]
    converged = False
    rounds = 0
    for rounds in range(1, config.max_rounds + 1):
        order = list(range(spec.n_agents))
        if config.order == "shuffle":
            rng.shuffle(order)
        before = profile
        for i in order:
            profile = best_response(spec, valuations, profile, i, params, mechanism, config, rng).profile
        change = profile.distance(before)
        trace.append(_trace_row(spec, valuations, profile, params, mechanism, rounds, change))
        logger.debug("best-response round %d: max change %.3g", rounds, change)
        if change <= config.profile_tol:
            converged = True
            break

    report = verify_equilibrium(
        spec,
        valuations,
        profile,
        params,
        mechanism,
        tol,
        epsilon=config.epsilon,
        deviation_samples=config.deviation_samples,
        rng=rng,
    )
    report.rounds = rounds
    report.trace = trace
    if not converged:
        report.status = "not_converged"
        logger.warning("best-response dynamics did not converge in %d rounds", config.max_rounds)
    return report


def perturb_profile(
    spec: NetworkSpec,
    profile: MessageProfile,
    rng: np.random.Generator,
    scale: float = 0.05,
    price_jitter: float = 0.0,
) -> MessageProfile:
    y = profile.y * (1.0 + scale * rng.uniform(-1.0, 1.0, size=profile.y.shape))
    prices = profile.prices
    if price_jitter > 0:
        noise = 1.0 + price_jitter * rng.uniform(-1.0, 1.0, size=prices.shape)
        prices = np.where(spec.route_mask, np.maximum(prices * noise, 0.0), 0.0)
    rho = None
    if profile.rho is not None:
        rho = profile.rho * (1.0 + scale * rng.uniform(-1.0, 1.0, size=profile.rho.shape))
    return MessageProfile(y=np.maximum(y, 0.0), prices=prices.copy(), rho=rho)
