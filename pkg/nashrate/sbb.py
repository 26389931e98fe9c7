from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from nashrate.config import settings
from nashrate.messages import MessageProfile
from nashrate.network import NetworkSpec, ValuationProfile
from nashrate.types import AllocationRule
from nashrate.wbb import (
    MechanismParams,
    Outcome,
    TaxBreakdown,
    avg_prices_excluding,
    scale_and_allocate,
    wbb_link_taxes,
)


logger = logging.getLogger("nashrate.sbb")


@dataclass(frozen=True)
class SbbParams(MechanismParams):
    zeta: float = field(default_factory=lambda: settings.MECH_ZETA)

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.zeta > 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")


def _require_rho(profile: MessageProfile) -> np.ndarray:
    if profile.rho is None:
        raise ValueError("budget-balanced taxes need rho in every message")
    return profile.rho


def avg_rho_excluding(profile: MessageProfile, i: int) -> float:
    rho = _require_rho(profile)
    n = rho.shape[0]
    if n < 2:
        raise ValueError("averaging rho over the other agents needs at least two agents")
    return float((np.sum(rho) - rho[i]) / (n - 1))


def avg_rhos_excluding(rho: np.ndarray) -> np.ndarray:
    n = rho.shape[0]
    if n < 2:
        raise ValueError("averaging rho over the other agents needs at least two agents")
    return (np.sum(rho) - rho) / (n - 1)


def redistribution_matrix(spec: NetworkSpec, profile: MessageProfile) -> np.ndarray:
    """Per-link redistribution terms; entry [l, i] depends on others' messages only."""
    rho = _require_rho(profile)
    mask = spec.route_mask
    n = mask.sum(axis=1).astype(float)
    pbar = avg_prices_excluding(spec, profile.prices)
    weighted = spec.alpha * profile.y[None, :]
    others_demand = weighted.sum(axis=1)[:, None] - weighted
    rho_bar = avg_rhos_excluding(rho)
    term = -(rho_bar[None, :] * pbar / (n[:, None] - 1.0)) * others_demand
    return np.where(mask, term, 0.0)


def tax_components_sbb(spec: NetworkSpec, profile: MessageProfile, params: SbbParams) -> TaxBreakdown:
    rho = _require_rho(profile)
    r, _, x = scale_and_allocate(spec, profile.y, params.allocation)
    payment, disagreement, slack_term = wbb_link_taxes(spec, profile, x, params.eta)
    return TaxBreakdown(
        payment=payment.sum(axis=0),
        disagreement=disagreement.sum(axis=0),
        slack=slack_term.sum(axis=0),
        redistribution=redistribution_matrix(spec, profile).sum(axis=0),
        rho_penalty=params.zeta * (rho - r) ** 2,
    )


def tax_sbb(spec: NetworkSpec, profile: MessageProfile, params: SbbParams) -> np.ndarray:
    return tax_components_sbb(spec, profile, params).total


def outcome_sbb(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    profile: MessageProfile,
    params: SbbParams,
) -> Outcome:
    rho = _require_rho(profile)
    r, factors, x = scale_and_allocate(spec, profile.y, params.allocation)
    payment, disagreement, slack_term = wbb_link_taxes(spec, profile, x, params.eta)
    t = (payment + disagreement + slack_term + redistribution_matrix(spec, profile)).sum(axis=0)
    t = t + params.zeta * (rho - r) ** 2
    u = valuations.values(x) - t
    out = Outcome(x=x, t=t, u=u, r=r, factors=factors)
    logger.debug("sbb outcome: r=%.6g budget=%.3g", r, out.budget_residual)
    return out


def total_payment(spec: NetworkSpec, profile: MessageProfile, allocation: AllocationRule = "corrected") -> tuple[float, float]:
    """Total payment at a common price per link, as sum p^l alpha x and as r sum p^l alpha y."""
    r, _, x = scale_and_allocate(spec, profile.y, allocation)
    mask = spec.route_mask
    common = np.sum(np.where(mask, profile.prices, 0.0), axis=1) / mask.sum(axis=1)
    x_form = float(common @ (spec.alpha @ x))
    ry_form = float(r * (common @ (spec.alpha @ profile.y)))
    return x_form, ry_form


def redistribution_total(spec: NetworkSpec, profile: MessageProfile) -> float:
    return float(np.sum(redistribution_matrix(spec, profile)))
