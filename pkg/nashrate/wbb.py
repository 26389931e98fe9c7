from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from nashrate.config import settings
from nashrate.messages import MessageProfile
from nashrate.network import NetworkSpec, ValuationProfile, link_loads
from nashrate.types import AllocationRule, LinkRegime


logger = logging.getLogger("nashrate.wbb")

_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class MechanismParams:
    eta: float = field(default_factory=lambda: settings.MECH_ETA)
    allocation: AllocationRule = "corrected"

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.allocation not in ("corrected", "pure"):
            raise ValueError(f"unknown allocation rule: {self.allocation}")


@dataclass(frozen=True)
class LinkFactor:
    link_id: int
    regime: LinkRegime
    value: Optional[float]
    active: tuple[int, ...]

    @property
    def unbounded(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class ScaleFactors:
    r: float
    per_link: tuple[LinkFactor, ...]
    argmin: tuple[int, ...]

    @property
    def link(self) -> int:
        return self.argmin[0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "r": self.r,
            "argmin": list(self.argmin),
            "per_link": [None if f.unbounded else f.value for f in self.per_link],
        }


@dataclass(frozen=True)
class TaxBreakdown:
    payment: np.ndarray
    disagreement: np.ndarray
    slack: np.ndarray
    redistribution: np.ndarray
    rho_penalty: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.payment + self.disagreement + self.slack + self.redistribution + self.rho_penalty


@dataclass(frozen=True)
class Outcome:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    r: float
    factors: Optional[ScaleFactors]

    @property
    def revenue(self) -> float:
        return float(np.sum(self.t))

    @property
    def budget_residual(self) -> float:
        return float(np.sum(self.t))

    def to_dict(self) -> dict[str, Any]:
        return {
            "x": [float(v) for v in self.x],
            "t": [float(v) for v in self.t],
            "u": [float(v) for v in self.u],
            "r": self.r,
            "revenue": self.revenue,
            "scale": None if self.factors is None else self.factors.to_dict(),
        }


def single_active_factor(capacity: float, coef: float, y_i: float) -> float:
    """c / (alpha y) - c / (alpha y (y + 1)).

    1/y - 1/(y (y + 1)) = 1/(y + 1), so the difference is evaluated as
    c / (alpha (y + 1)); the subtracted form cancels badly for small y.
    """
    if not y_i > 0:
        raise ValueError(f"single-active factor needs a positive demand, got {y_i}")
    return capacity / (coef * (y_i + 1.0))


def link_factor(spec: NetworkSpec, y: np.ndarray, link_id: int, allocation: AllocationRule = "corrected") -> LinkFactor:
    members = spec.member_arrays[link_id]
    active = tuple(int(j) for j in members if y[j] > 0)
    cap = float(spec.capacity[link_id])
    if not active:
        return LinkFactor(link_id=link_id, regime="idle", value=None, active=active)
    if len(active) == 1 and allocation == "corrected":
        i = active[0]
        value = single_active_factor(cap, float(spec.alpha[link_id, i]), float(y[i]))
        return LinkFactor(link_id=link_id, regime="single", value=value, active=active)
    demand = float(spec.alpha[link_id, list(active)] @ y[list(active)])
    regime: LinkRegime = "single" if len(active) == 1 else "shared"
    return LinkFactor(link_id=link_id, regime=regime, value=cap / demand, active=active)


def scale_factors(spec: NetworkSpec, y: np.ndarray, allocation: AllocationRule = "corrected") -> ScaleFactors:
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n_agents,):
        raise ValueError(f"demand vector has shape {y.shape}, expected ({spec.n_agents},)")
    if np.any(y < 0):
        raise ValueError("demands must be nonnegative")
    if not np.any(y > 0):
        raise ValueError("scale factors are undefined for the all-zero demand vector")

    per_link = tuple(link_factor(spec, y, l, allocation) for l in range(spec.n_links))
    bounded = [f for f in per_link if not f.unbounded]
    # some agent is active and every agent routes over at least one link
    assert bounded, "nonzero demand left every link idle"
    r = min(f.value for f in bounded)
    argmin = tuple(f.link_id for f in bounded if f.value <= r * (1.0 + _TIE_RTOL))
    return ScaleFactors(r=r, per_link=per_link, argmin=argmin)


def allocate(spec: NetworkSpec, y: np.ndarray, allocation: AllocationRule = "corrected") -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.any(y > 0):
        if np.any(y < 0):
            raise ValueError("demands must be nonnegative")
        return np.zeros(spec.n_agents)
    factors = scale_factors(spec, y, allocation)
    return factors.r * y


def scale_and_allocate(
    spec: NetworkSpec, y: np.ndarray, allocation: AllocationRule = "corrected"
) -> tuple[float, Optional[ScaleFactors], np.ndarray]:
    """r, the factors and x; r is 0 and factors None at the zero demand."""
    y = np.asarray(y, dtype=float)
    if not np.any(y > 0):
        if np.any(y < 0):
            raise ValueError("demands must be nonnegative")
        return 0.0, None, np.zeros(spec.n_agents)
    factors = scale_factors(spec, y, allocation)
    return factors.r, factors, factors.r * y


def avg_price_excluding(spec: NetworkSpec, prices: np.ndarray, i: int, l: int) -> float:
    members = spec.members[l]
    if i not in members:
        raise ValueError(f"agent {i} does not route over link {l}")
    if len(members) < 2:
        raise ValueError(f"link {l} has a single user, no other quotes to average")
    others = [j for j in members if j != i]
    return float(np.mean(prices[l, others]))


def avg_prices_excluding(spec: NetworkSpec, prices: np.ndarray) -> np.ndarray:
    """Matrix of p-bar_{-i}^l, zero off routes."""
    mask = spec.route_mask
    n = mask.sum(axis=1).astype(float)
    if np.any(n < 2):
        raise ValueError("every link needs at least two users to average quotes")
    totals = np.sum(np.where(mask, prices, 0.0), axis=1)
    out = (totals[:, None] - prices) / (n[:, None] - 1.0)
    return np.where(mask, out, 0.0)


def wbb_link_taxes(spec: NetworkSpec, profile: MessageProfile, x: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mask = spec.route_mask
    pbar = avg_prices_excluding(spec, profile.prices)
    diff = np.where(mask, profile.prices - pbar, 0.0)
    slack = spec.capacity - link_loads(spec, x)
    payment = spec.alpha * x[None, :] * pbar
    disagreement = np.where(mask, diff**2, 0.0)
    slack_term = eta * pbar * diff * slack[:, None]
    return payment, disagreement, slack_term


def tax_components(spec: NetworkSpec, profile: MessageProfile, params: MechanismParams) -> TaxBreakdown:
    x = allocate(spec, profile.y, params.allocation)
    payment, disagreement, slack_term = wbb_link_taxes(spec, profile, x, params.eta)
    zeros = np.zeros(spec.n_agents)
    return TaxBreakdown(
        payment=payment.sum(axis=0),
        disagreement=disagreement.sum(axis=0),
        slack=slack_term.sum(axis=0),
        redistribution=zeros,
        rho_penalty=zeros.copy(),
    )


def tax_wbb(spec: NetworkSpec, profile: MessageProfile, params: MechanismParams) -> np.ndarray:
    return tax_components(spec, profile, params).total


def outcome_wbb(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: MechanismParams,
) -> Outcome:
    r, factors, x = scale_and_allocate(spec, profile.y, params.allocation)
    payment, disagreement, slack_term = wbb_link_taxes(spec, profile, x, params.eta)
    t = (payment + disagreement + slack_term).sum(axis=0)
    u = valuations.values(x) - t
    out = Outcome(x=x, t=t, u=u, r=r, factors=factors)
    logger.debug("wbb outcome: r=%.6g revenue=%.6g", r, out.revenue)
    return out
