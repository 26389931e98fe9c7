from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np

from nashrate.network import NetworkSpec
from nashrate.types import MechanismKind


@dataclass(frozen=True)
class WbbMessage:
    y: float
    p: Mapping[int, float]

    def __post_init__(self) -> None:
        if not self.y >= 0:
            raise ValueError(f"demand must be nonnegative, got {self.y}")
        for link_id, price in self.p.items():
            if not price >= 0:
                raise ValueError(f"price on link {link_id} must be nonnegative, got {price}")


@dataclass(frozen=True)
class SbbMessage(WbbMessage):
    rho: float = 0.0

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.rho >= 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")


@dataclass(frozen=True)
class MessageProfile:
    """Messages of all agents, stored densely.

    prices[l, i] is meaningful only when agent i routes over link l and is
    kept at zero elsewhere. rho is present only for budget-balanced play.
    """

    y: np.ndarray
    prices: np.ndarray
    rho: Optional[np.ndarray] = None

    @property
    def n_agents(self) -> int:
        return int(self.y.shape[0])

    @property
    def kind(self) -> MechanismKind:
        return "wbb" if self.rho is None else "sbb"

    def message(self, spec: NetworkSpec, i: int) -> WbbMessage:
        p = {l: float(self.prices[l, i]) for l in spec.routes[i]}
        if self.rho is None:
            return WbbMessage(y=float(self.y[i]), p=p)
        return SbbMessage(y=float(self.y[i]), p=p, rho=float(self.rho[i]))

    def replace(self, spec: NetworkSpec, i: int, message: WbbMessage) -> MessageProfile:
        if set(message.p) != set(spec.routes[i]):
            raise ValueError(f"agent {i} must quote exactly its route {list(spec.routes[i])}, got {sorted(message.p)}")
        y = self.y.copy()
        prices = self.prices.copy()
        y[i] = message.y
        for l, price in message.p.items():
            prices[l, i] = price
        rho = None
        if self.rho is not None:
            if not isinstance(message, SbbMessage):
                raise ValueError("budget-balanced profiles need a rho in every message")
            rho = self.rho.copy()
            rho[i] = message.rho
        return MessageProfile(y=y, prices=prices, rho=rho)

    def distance(self, other: MessageProfile) -> float:
        d = max(float(np.max(np.abs(self.y - other.y))), float(np.max(np.abs(self.prices - other.prices), initial=0.0)))
        if self.rho is not None and other.rho is not None:
            d = max(d, float(np.max(np.abs(self.rho - other.rho))))
        return d

    def to_dict(self, spec: NetworkSpec) -> dict[str, Any]:
        agents = []
        for i in range(self.n_agents):
            item: dict[str, Any] = {
                "y": float(self.y[i]),
                "p": {str(l): float(self.prices[l, i]) for l in spec.routes[i]},
            }
            if self.rho is not None:
                item["rho"] = float(self.rho[i])
            agents.append(item)
        return {"agents": agents}


def make_profile(
    spec: NetworkSpec,
    y: Any,
    prices: Any,
    rho: Any = None,
) -> MessageProfile:
    """Build a validated profile.

    prices may be an L x N matrix, a per-link vector (every user of link l
    quotes prices[l]) or a scalar.
    """
    y = np.array(y, dtype=float).reshape(-1)
    if y.shape != (spec.n_agents,):
        raise ValueError(f"demand vector has shape {y.shape}, expected ({spec.n_agents},)")
    p = np.asarray(prices, dtype=float)
    if p.ndim == 0:
        p = np.full((spec.n_links, spec.n_agents), float(p))
    elif p.ndim == 1:
        if p.shape != (spec.n_links,):
            raise ValueError(f"per-link prices have shape {p.shape}, expected ({spec.n_links},)")
        p = np.repeat(p[:, None], spec.n_agents, axis=1)
    elif p.shape != (spec.n_links, spec.n_agents):
        raise ValueError(f"price matrix has shape {p.shape}, expected ({spec.n_links}, {spec.n_agents})")
    p = np.where(spec.route_mask, p, 0.0)

    r = None
    if rho is not None:
        r = np.array(rho, dtype=float).reshape(-1)
        if r.size == 1:
            r = np.full(spec.n_agents, float(r[0]))
        if r.shape != (spec.n_agents,):
            raise ValueError(f"rho vector has shape {r.shape}, expected ({spec.n_agents},)")
        if np.any(r < 0):
            raise ValueError("rho must be nonnegative")

    if np.any(y < 0):
        raise ValueError("demands must be nonnegative")
    if np.any(p < 0):
        raise ValueError("prices must be nonnegative")
    return MessageProfile(y=y, prices=p, rho=r)


def profile_from_dict(spec: NetworkSpec, payload: Mapping[str, Any]) -> MessageProfile:
    agents = payload.get("agents")
    if not isinstance(agents, list) or len(agents) != spec.n_agents:
        raise ValueError(f"profile must list {spec.n_agents} agents")
    y = [float(a["y"]) for a in agents]
    prices = np.zeros((spec.n_links, spec.n_agents))
    for i, a in enumerate(agents):
        quoted = {int(k): float(v) for k, v in dict(a.get("p", {})).items()}
        if set(quoted) != set(spec.routes[i]):
            raise ValueError(f"agent {i} must quote exactly its route {list(spec.routes[i])}")
        for l, v in quoted.items():
            prices[l, i] = v
    rho = [float(a["rho"]) for a in agents] if all("rho" in a for a in agents) else None
    return make_profile(spec, y, prices, rho)


def agent_vector(spec: NetworkSpec, profile: MessageProfile, i: int, mechanism: MechanismKind) -> np.ndarray:
    """s_i as a flat vector: (y_i, prices on route in link order, [rho_i])."""
    parts = [profile.y[i]] + [profile.prices[l, i] for l in spec.routes[i]]
    if mechanism == "sbb":
        if profile.rho is None:
            raise ValueError("budget-balanced play needs rho in the profile")
        parts.append(profile.rho[i])
    return np.array(parts, dtype=float)


def with_agent_vector(
    spec: NetworkSpec,
    profile: MessageProfile,
    i: int,
    vec: np.ndarray,
    mechanism: MechanismKind,
) -> MessageProfile:
    route = spec.routes[i]
    expected = 1 + len(route) + (1 if mechanism == "sbb" else 0)
    if vec.shape != (expected,):
        raise ValueError(f"agent vector has shape {vec.shape}, expected ({expected},)")
    y = profile.y.copy()
    prices = profile.prices.copy()
    y[i] = vec[0]
    for k, l in enumerate(route):
        prices[l, i] = vec[1 + k]
    rho = profile.rho
    if mechanism == "sbb":
        rho = profile.rho.copy()
        rho[i] = vec[-1]
    return MessageProfile(y=y, prices=prices, rho=rho)


def zero_profile(spec: NetworkSpec, mechanism: MechanismKind) -> MessageProfile:
    rho = np.zeros(spec.n_agents) if mechanism == "sbb" else None
    return MessageProfile(y=np.zeros(spec.n_agents), prices=np.zeros((spec.n_links, spec.n_agents)), rho=rho)
