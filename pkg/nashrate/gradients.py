from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from nashrate.messages import MessageProfile, agent_vector, with_agent_vector
from nashrate.network import NetworkSpec, ValuationProfile
from nashrate.sbb import SbbParams, outcome_sbb
from nashrate.types import MechanismKind, Side, SlopeCase
from nashrate.wbb import MechanismParams, Outcome, avg_prices_excluding, outcome_wbb, scale_and_allocate


KINK_RTOL = 1e-7

Params = Union[MechanismParams, SbbParams]


@dataclass(frozen=True)
class SlopeInfo:
    """Piece of r(y) selected on one side of y_i.

    r and dr are the value and the one-sided derivative of the scaling
    factor in y_i; links are the argmin links on that side, link the one
    whose slope was taken.
    """

    r: float
    dr: float
    links: tuple[int, ...]
    link: int
    case: SlopeCase

    def beta(self, y_i: float) -> float:
        return y_i * self.dr + self.r


@dataclass(frozen=True)
class UtilityGradient:
    dy_right: float
    dy_left: Optional[float]
    dp: np.ndarray
    drho: Optional[float]
    right: SlopeInfo
    left: Optional[SlopeInfo]

    def vector(self, side: Side = "right") -> np.ndarray:
        if side == "left":
            if self.dy_left is None:
                raise ValueError("left derivative in demand is undefined at zero demand")
            dy = self.dy_left
        else:
            dy = self.dy_right
        parts = [dy, *self.dp]
        if self.drho is not None:
            parts.append(self.drho)
        return np.array(parts, dtype=float)


def mechanism_outcome(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: Params,
    mechanism: MechanismKind,
) -> Outcome:
    if mechanism == "sbb":
        if not isinstance(params, SbbParams):
            raise ValueError("budget-balanced play needs SbbParams")
        return outcome_sbb(spec, valuations, profile, params)
    return outcome_wbb(spec, valuations, profile, params)


def agent_utility(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    i: int,
    params: Params,
    mechanism: MechanismKind,
) -> float:
    return float(mechanism_outcome(spec, valuations, profile, params, mechanism).u[i])


def _link_piece(
    spec: NetworkSpec,
    y: np.ndarray,
    i: int,
    l: int,
    params: Params,
) -> tuple[float, float, SlopeCase]:
    """Value and slope in y_i of r^l with agent i counted as active."""
    cap = float(spec.capacity[l])
    coef = float(spec.alpha[l, i])
    members = spec.members[l]
    if coef == 0.0:
        active = [j for j in members if y[j] > 0]
        if not active:
            return math.inf, 0.0, "A"
        if len(active) == 1 and params.allocation == "corrected":
            j = active[0]
            a_j = float(spec.alpha[l, j])
            return cap / (a_j * (y[j] + 1.0)), 0.0, "A"
        demand = float(spec.alpha[l, active] @ y[active])
        return cap / demand, 0.0, "A"

    others = [j for j in members if j != i and y[j] > 0]
    if others:
        demand = float(spec.alpha[l, others] @ y[others]) + coef * float(y[i])
        return cap / demand, -cap * coef / demand**2, "B1"
    y_i = float(y[i])
    if params.allocation == "pure":
        if y_i == 0.0:
            return math.inf, 0.0, "B2"
        return cap / (coef * y_i), -cap / (coef * y_i**2), "B2"
    return cap / (coef * (y_i + 1.0)), -cap / (coef * (y_i + 1.0) ** 2), "B2"


def one_sided_slopes(
    spec: NetworkSpec,
    y: np.ndarray,
    i: int,
    side: Side,
    params: Params,
    kink_rtol: float = KINK_RTOL,
) -> SlopeInfo:
    y = np.asarray(y, dtype=float)
    if side == "left" and not y[i] > 0:
        raise ValueError(f"left derivative in demand is undefined at zero demand (agent {i})")
    pieces = [_link_piece(spec, y, i, l, params) for l in range(spec.n_links)]
    r = min(v for v, _, _ in pieces)
    if not math.isfinite(r):
        raise ValueError(f"scaling factor is unbounded around the demand vector for agent {i}")
    tied = [l for l, (v, _, _) in enumerate(pieces) if v <= r * (1.0 + kink_rtol)]
    if side == "right":
        link = min(tied, key=lambda l: (pieces[l][1], l))
    else:
        link = min(tied, key=lambda l: (-pieces[l][1], l))
    _, dr, case = pieces[link]
    return SlopeInfo(r=r, dr=dr, links=tuple(tied), link=link, case=case)


def _demand_gradient(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    i: int,
    params: Params,
    mechanism: MechanismKind,
    slopes: SlopeInfo,
    x: np.ndarray,
    pbar: np.ndarray,
) -> float:
    y = profile.y
    dx = y * slopes.dr
    dx[i] += slopes.r
    beta = dx[i]
    route = list(spec.routes[i])
    coefs = spec.alpha[route, i]
    pb = pbar[route, i]
    diff = profile.prices[route, i] - pb
    load_change = spec.alpha[route, :] @ dx
    g = valuations.d1(i, float(x[i])) * beta - float(coefs @ pb) * beta
    g += params.eta * float(np.sum(pb * diff * load_change))
    if mechanism == "sbb":
        assert isinstance(params, SbbParams) and profile.rho is not None
        g += 2.0 * params.zeta * (profile.rho[i] - slopes.r) * slopes.dr
    return g


def utility_gradient(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    i: int,
    params: Params,
    mechanism: MechanismKind,
    kink_rtol: float = KINK_RTOL,
) -> UtilityGradient:
    if mechanism == "sbb" and (not isinstance(params, SbbParams) or profile.rho is None):
        raise ValueError("budget-balanced play needs SbbParams and rho in the profile")
    r_now, _, x = scale_and_allocate(spec, profile.y, params.allocation)
    pbar = avg_prices_excluding(spec, profile.prices)
    slack = spec.capacity - spec.alpha @ x
    route = list(spec.routes[i])
    diff = profile.prices[route, i] - pbar[route, i]
    dp = -2.0 * diff - params.eta * pbar[route, i] * slack[route]

    right = one_sided_slopes(spec, profile.y, i, "right", params, kink_rtol)
    dy_right = _demand_gradient(spec, valuations, profile, i, params, mechanism, right, x, pbar)
    left: Optional[SlopeInfo] = None
    dy_left: Optional[float] = None
    if profile.y[i] > 0:
        left = one_sided_slopes(spec, profile.y, i, "left", params, kink_rtol)
        dy_left = _demand_gradient(spec, valuations, profile, i, params, mechanism, left, x, pbar)

    drho: Optional[float] = None
    if mechanism == "sbb":
        assert isinstance(params, SbbParams) and profile.rho is not None
        drho = -2.0 * params.zeta * (float(profile.rho[i]) - r_now)
    return UtilityGradient(dy_right=dy_right, dy_left=dy_left, dp=dp, drho=drho, right=right, left=left)


def hessian(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    i: int,
    params: Params,
    mechanism: MechanismKind,
    side: Side = "right",
    *,
    h_demand: Optional[float] = None,
    h_linear: float = 0.1,
    kink_rtol: float = KINK_RTOL,
) -> np.ndarray:
    """Symmetrized one-sided difference of analytic gradients over s_i.

    The right Hessian steps forward from s_i, the left one backward, so the
    demand column stays on the selected piece of r.
    """
    s = agent_vector(spec, profile, i, mechanism)
    if h_demand is None:
        h_demand = 1e-6 * max(1.0, abs(float(s[0])))
    if side == "left" and not s[0] > h_demand:
        raise ValueError("left Hessian needs demand above the difference step")
    sign = 1.0 if side == "right" else -1.0

    def grad_at(vec: np.ndarray) -> np.ndarray:
        shifted = with_agent_vector(spec, profile, i, vec, mechanism)
        return utility_gradient(spec, valuations, shifted, i, params, mechanism, kink_rtol).vector(side)

    base = grad_at(s)
    n = s.shape[0]
    h_mat = np.zeros((n, n))
    for k in range(n):
        h = h_demand if k == 0 else h_linear
        step = np.zeros(n)
        step[k] = sign * h
        h_mat[:, k] = sign * (grad_at(s + step) - base) / h
    return 0.5 * (h_mat + h_mat.T)
