from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class LinkSpec:
    id: int
    capacity: float
    coefficients: Mapping[int, float]


@dataclass(frozen=True)
class NetworkSpec:
    """Agents 0..N-1 sending over fixed routes of links 0..L-1.

    Construction only checks that the data is well-formed; the modelling
    assumptions are reported by validate_spec.
    """

    n_agents: int
    links: tuple[LinkSpec, ...]
    routes: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.routes) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} routes, got {len(self.routes)}")
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "routes", tuple(tuple(sorted(r)) for r in self.routes))
        for pos, link in enumerate(self.links):
            if link.id != pos:
                raise ValueError(f"link ids must be dense indices, link at {pos} has id {link.id}")

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def alpha(self) -> np.ndarray:
        """L x N coefficient matrix, zero where the agent does not use the link."""
        a = np.zeros((self.n_links, self.n_agents))
        for link in self.links:
            for agent, coef in link.coefficients.items():
                a[link.id, agent] = coef
        a.setflags(write=False)
        return a

    @cached_property
    def capacity(self) -> np.ndarray:
        c = np.array([link.capacity for link in self.links], dtype=float)
        c.setflags(write=False)
        return c

    @cached_property
    def members(self) -> tuple[tuple[int, ...], ...]:
        """Agents routed over each link, sorted."""
        out: list[list[int]] = [[] for _ in range(self.n_links)]
        for agent, route in enumerate(self.routes):
            for link_id in route:
                if 0 <= link_id < self.n_links:
                    out[link_id].append(agent)
        return tuple(tuple(sorted(m)) for m in out)

    @cached_property
    def member_arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(np.array(m, dtype=int) for m in self.members)

    @cached_property
    def route_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_links, self.n_agents), dtype=bool)
        for agent, route in enumerate(self.routes):
            mask[list(route), agent] = True
        mask.setflags(write=False)
        return mask

    def n_on_link(self, link_id: int) -> int:
        return len(self.members[link_id])


@dataclass(frozen=True)
class ValuationProfile:
    """v_i(x) = a_i ln(1 + b_i x) for every agent."""

    a: tuple[float, ...]
    b: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.a) != len(self.b):
            raise ValueError("valuation parameter vectors differ in length")
        for ai, bi in zip(self.a, self.b):
            if not (ai > 0 and bi > 0 and math.isfinite(ai) and math.isfinite(bi)):
                raise ValueError(f"valuation parameters must be positive and finite, got a={ai}, b={bi}")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))

    @property
    def n_agents(self) -> int:
        return len(self.a)

    @cached_property
    def a_vec(self) -> np.ndarray:
        v = np.array(self.a)
        v.setflags(write=False)
        return v

    @cached_property
    def b_vec(self) -> np.ndarray:
        v = np.array(self.b)
        v.setflags(write=False)
        return v

    def value(self, i: int, x: float) -> float:
        _require_nonneg(x)
        return self.a[i] * math.log1p(self.b[i] * x)

    def d1(self, i: int, x: float) -> float:
        _require_nonneg(x)
        return self.a[i] * self.b[i] / (1.0 + self.b[i] * x)

    def d2(self, i: int, x: float) -> float:
        _require_nonneg(x)
        return -self.a[i] * self.b[i] ** 2 / (1.0 + self.b[i] * x) ** 2

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.a_vec * np.log1p(self.b_vec * x)

    def d1s(self, x: np.ndarray) -> np.ndarray:
        return self.a_vec * self.b_vec / (1.0 + self.b_vec * x)

    def inverse_d1(self, mu: np.ndarray) -> np.ndarray:
        """argmax over x >= 0 of v_i(x) - mu_i x; +inf where mu_i <= 0."""
        mu = np.asarray(mu, dtype=float)
        out = np.full(mu.shape, np.inf)
        pos = mu > 0
        out[pos] = np.maximum(self.a_vec[pos] / mu[pos] - 1.0 / self.b_vec[pos], 0.0)
        return out


@dataclass(frozen=True)
class ActiveSet:
    per_link: tuple[frozenset[int], ...]
    agents: frozenset[int]

    def size(self, link_id: int) -> int:
        return len(self.per_link[link_id])


@dataclass(frozen=True)
class SampleRanges:
    capacity: tuple[float, float] = (0.5, 2.0)
    alpha: tuple[float, float] = (0.5, 1.5)
    a: tuple[float, float] = (1.0, 3.0)
    b: tuple[float, float] = (0.5, 2.0)
    route_prob: float = 0.6


def _require_nonneg(x: float) -> None:
    if not x >= 0:
        raise ValueError(f"valuation evaluated at negative rate {x}")


def validate_spec(spec: NetworkSpec) -> list[str]:
    problems: list[str] = []
    for agent, route in enumerate(spec.routes):
        if not route:
            problems.append(f"empty route for agent {agent}")
        for link_id in route:
            if not 0 <= link_id < spec.n_links:
                problems.append(f"agent {agent} routes over unknown link {link_id}")
    for link in spec.links:
        users = set(spec.members[link.id])
        if len(users) == 0:
            problems.append(f"link {link.id} is on no route")
        elif len(users) < 2:
            problems.append(f"A3 on link {link.id}: {len(users)} agent(s), need at least 2")
        if not (link.capacity > 0 and math.isfinite(link.capacity)):
            problems.append(f"capacity positivity on link {link.id}: c={link.capacity}")
        if set(link.coefficients) != users:
            problems.append(
                f"coefficients on link {link.id} cover agents {sorted(link.coefficients)}, routes give {sorted(users)}"
            )
        for agent, coef in sorted(link.coefficients.items()):
            if not (coef > 0 and math.isfinite(coef)):
                problems.append(f"coefficient positivity on link {link.id} for agent {agent}: alpha={coef}")
    return problems


def valuation(profile: ValuationProfile, i: int, x: float) -> float:
    return profile.value(i, x)


def valuation_d1(profile: ValuationProfile, i: int, x: float) -> float:
    return profile.d1(i, x)


def valuation_d2(profile: ValuationProfile, i: int, x: float) -> float:
    return profile.d2(i, x)


def active_set(spec: NetworkSpec, y: Sequence[float]) -> ActiveSet:
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n_agents,):
        raise ValueError(f"demand vector has shape {y.shape}, expected ({spec.n_agents},)")
    if np.any(y < 0):
        raise ValueError("demands must be nonnegative")
    agents = frozenset(int(i) for i in np.flatnonzero(y > 0))
    per_link = tuple(frozenset(j for j in members if j in agents) for members in spec.members)
    return ActiveSet(per_link=per_link, agents=agents)


def a4_violations(spec: NetworkSpec, x: np.ndarray, threshold: float = 0.0) -> list[int]:
    """Links carrying fewer than two components of x above threshold."""
    support = np.asarray(x) > threshold
    return [l for l, members in enumerate(spec.members) if sum(bool(support[j]) for j in members) < 2]


def link_loads(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    return spec.alpha @ np.asarray(x, dtype=float)


def link_slacks(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    return spec.capacity - link_loads(spec, x)


def welfare(valuations: ValuationProfile, x: np.ndarray) -> float:
    return float(np.sum(valuations.values(np.asarray(x, dtype=float))))


def coefficient_from_coding(coding_rate: float, error_prob: float) -> float:
    if not 0 < coding_rate:
        raise ValueError(f"coding rate must be positive, got {coding_rate}")
    if not 0 <= error_prob < 1:
        raise ValueError(f"packet error probability must lie in [0, 1), got {error_prob}")
    return 1.0 / (coding_rate * (1.0 - error_prob))


def build_spec(
    capacities: Sequence[float],
    routes: Sequence[Sequence[int]],
    coefficients: Optional[Mapping[tuple[int, int], float]] = None,
) -> NetworkSpec:
    """Convenience constructor; coefficients keyed by (link, agent), default 1."""
    coefficients = coefficients or {}
    n_agents = len(routes)
    links = []
    for link_id, cap in enumerate(capacities):
        users = [agent for agent, route in enumerate(routes) if link_id in route]
        coefs = {agent: float(coefficients.get((link_id, agent), 1.0)) for agent in users}
        links.append(LinkSpec(id=link_id, capacity=float(cap), coefficients=coefs))
    return NetworkSpec(n_agents=n_agents, links=tuple(links), routes=tuple(tuple(r) for r in routes))


def random_instance(
    rng: np.random.Generator,
    n_agents: int,
    n_links: int,
    ranges: Optional[SampleRanges] = None,
) -> tuple[NetworkSpec, ValuationProfile]:
    if n_agents < 2:
        raise ValueError("random instances need at least two agents")
    if n_links < 1:
        raise ValueError("random instances need at least one link")
    ranges = ranges or SampleRanges()

    routes: list[set[int]] = []
    for _ in range(n_agents):
        picked = {l for l in range(n_links) if rng.random() < ranges.route_prob}
        if not picked:
            picked = {int(rng.integers(n_links))}
        routes.append(picked)

    for l in range(n_links):
        users = [i for i in range(n_agents) if l in routes[i]]
        while len(users) < 2:
            candidates = [i for i in range(n_agents) if i not in users]
            extra = int(rng.choice(candidates))
            routes[extra].add(l)
            users.append(extra)

    links = []
    for l in range(n_links):
        users = sorted(i for i in range(n_agents) if l in routes[i])
        coefs = {i: float(rng.uniform(*ranges.alpha)) for i in users}
        links.append(LinkSpec(id=l, capacity=float(rng.uniform(*ranges.capacity)), coefficients=coefs))
    spec = NetworkSpec(n_agents=n_agents, links=tuple(links), routes=tuple(tuple(sorted(r)) for r in routes))
    vals = ValuationProfile(
        a=tuple(float(v) for v in rng.uniform(*ranges.a, size=n_agents)),
        b=tuple(float(v) for v in rng.uniform(*ranges.b, size=n_agents)),
    )
    return spec, vals


def a4_holds(spec: NetworkSpec, x: np.ndarray, threshold: float = 1e-9) -> tuple[bool, list[int]]:
    bad = a4_violations(spec, x, threshold)
    return (not bad, bad)


def inverse_d1(valuations: ValuationProfile, mu: np.ndarray) -> np.ndarray:
    return valuations.inverse_d1(mu)
