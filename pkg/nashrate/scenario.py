from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from nashrate.dynamics import BrConfig
from nashrate.network import (
    LinkSpec,
    NetworkSpec,
    SampleRanges,
    ValuationProfile,
    coefficient_from_coding,
    random_instance,
    validate_spec,
)
from nashrate.sbb import SbbParams
from nashrate.solver import SolverConfig
from nashrate.types import MechanismKind
from nashrate.wbb import MechanismParams


logger = logging.getLogger("nashrate.scenario")

SCHEMA_VERSION = 1
OVERRIDE_KEYS = ("eta", "zeta", "seed", "mechanism", "n_agents", "n_links", "allocation")


class ScenarioError(RuntimeError):
    def __init__(self, message: str, *, problems: Optional[list[str]] = None) -> None:
        self.problems = problems or [message]
        super().__init__(message if problems is None else f"{message}: " + "; ".join(self.problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ValuationModel(_Strict):
    a: float = Field(gt=0)
    b: float = Field(gt=0)


class CodingModel(_Strict):
    coding_rate: float = Field(gt=0)
    error_prob: float = Field(ge=0, lt=1)


class LinkModel(_Strict):
    id: int = Field(ge=0)
    capacity: float
    coefficients: dict[int, Union[float, CodingModel]] = Field(default_factory=dict)


class RandomModel(_Strict):
    n_agents: int = Field(ge=2)
    n_links: int = Field(ge=1)
    capacity: tuple[float, float] = (0.5, 2.0)
    alpha: tuple[float, float] = (0.5, 1.5)
    a: tuple[float, float] = (1.0, 3.0)
    b: tuple[float, float] = (0.5, 2.0)
    route_prob: float = Field(default=0.6, gt=0, le=1)


class ParamsModel(_Strict):
    eta: Optional[float] = Field(default=None, gt=0)
    zeta: Optional[float] = Field(default=None, gt=0)
    allocation: Literal["corrected", "pure"] = "corrected"


class SolverModel(_Strict):
    tolerance: Optional[float] = Field(default=None, gt=0)
    max_iterations: Optional[int] = Field(default=None, ge=1)
    step_rule: Literal["armijo", "diminishing"] = "armijo"
    initial_multiplier: Optional[float] = Field(default=None, gt=0)


class BrModel(_Strict):
    epsilon: Optional[float] = Field(default=None, gt=0)
    max_rounds: Optional[int] = Field(default=None, ge=1)
    inner_iterations: Optional[int] = Field(default=None, ge=1)
    profile_tol: Optional[float] = Field(default=None, gt=0)
    deviation_samples: Optional[int] = Field(default=None, ge=0)
    perturbed_starts: Optional[int] = Field(default=None, ge=0)
    order: Literal["index", "shuffle"] = "index"
    price_jitter: float = Field(default=0.0, ge=0)


class ScenarioFile(_Strict):
    schema_version: Literal[1]
    name: str
    mechanism: Literal["wbb", "sbb"] = "wbb"
    seed: int = 0
    agents: Optional[list[ValuationModel]] = None
    links: Optional[list[LinkModel]] = None
    routes: Optional[dict[int, list[int]]] = None
    random: Optional[RandomModel] = None
    params: ParamsModel = Field(default_factory=ParamsModel)
    solver: SolverModel = Field(default_factory=SolverModel)
    br: BrModel = Field(default_factory=BrModel)

    @model_validator(mode="after")
    def _one_network_source(self) -> ScenarioFile:
        explicit = [self.agents is not None, self.links is not None, self.routes is not None]
        if self.random is not None and any(explicit):
            raise ValueError("give either agents/links/routes or random, not both")
        if self.random is None and not all(explicit):
            raise ValueError("explicit scenarios need agents, links and routes")
        return self


@dataclass(frozen=True)
class Scenario:
    name: str
    network: NetworkSpec
    valuations: ValuationProfile
    mechanism: MechanismKind
    params: MechanismParams
    solver: SolverConfig
    br: BrConfig
    seed: int
    document: dict[str, Any]
    source: Optional[str] = None

    def scenario_hash(self) -> str:
        blob = json.dumps(self.document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _format_validation(exc: ValidationError) -> list[str]:
    problems = []
    for err in exc.errors():
        where = ".".join(str(part) for part in err.get("loc", ())) or "<root>"
        problems.append(f"{where}: {err.get('msg')}")
    return problems


def _explicit_network(doc: ScenarioFile) -> tuple[NetworkSpec, ValuationProfile]:
    assert doc.agents is not None and doc.links is not None and doc.routes is not None
    n = len(doc.agents)
    problems: list[str] = []
    for agent in range(n):
        if agent not in doc.routes:
            problems.append(f"missing route for agent {agent}")
    for agent in sorted(doc.routes):
        if not 0 <= agent < n:
            problems.append(f"route given for unknown agent {agent}")
    if sorted(link.id for link in doc.links) != list(range(len(doc.links))):
        problems.append("link ids must be 0..L-1 without gaps")
    if problems:
        raise ScenarioError("invalid scenario", problems=problems)

    links = []
    for link in sorted(doc.links, key=lambda item: item.id):
        coefs: dict[int, float] = {}
        for agent, coef in link.coefficients.items():
            if isinstance(coef, CodingModel):
                coefs[agent] = coefficient_from_coding(coef.coding_rate, coef.error_prob)
            else:
                coefs[agent] = float(coef)
        links.append(LinkSpec(id=link.id, capacity=float(link.capacity), coefficients=coefs))
    routes = tuple(tuple(doc.routes[agent]) for agent in range(n))
    spec = NetworkSpec(n_agents=n, links=tuple(links), routes=routes)
    valuations = ValuationProfile(a=tuple(v.a for v in doc.agents), b=tuple(v.b for v in doc.agents))
    return spec, valuations


def _random_network(doc: ScenarioFile) -> tuple[NetworkSpec, ValuationProfile]:
    assert doc.random is not None
    cfg = doc.random
    ranges = SampleRanges(capacity=cfg.capacity, alpha=cfg.alpha, a=cfg.a, b=cfg.b, route_prob=cfg.route_prob)
    rng = np.random.default_rng(doc.seed)
    return random_instance(rng, cfg.n_agents, cfg.n_links, ranges)


def _drop_none(values: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in values.items() if v is not None}


def scenario_from_dict(payload: Mapping[str, Any], source: Optional[str] = None) -> Scenario:
    try:
        doc = ScenarioFile.model_validate(payload)
    except ValidationError as exc:
        raise ScenarioError(f"invalid scenario {source or ''}".strip(), problems=_format_validation(exc)) from exc

    spec, valuations = _explicit_network(doc) if doc.random is None else _random_network(doc)
    problems = validate_spec(spec)
    if problems:
        raise ScenarioError("network violates modelling assumptions", problems=problems)

    param_values = _drop_none({"eta": doc.params.eta, "allocation": doc.params.allocation})
    if doc.mechanism == "sbb":
        params: MechanismParams = SbbParams(**param_values, **_drop_none({"zeta": doc.params.zeta}))
    else:
        params = MechanismParams(**param_values)
    solver = SolverConfig(**_drop_none(doc.solver.model_dump()))
    br = BrConfig(**_drop_none(doc.br.model_dump()))

    scenario = Scenario(
        name=doc.name,
        network=spec,
        valuations=valuations,
        mechanism=doc.mechanism,
        params=params,
        solver=solver,
        br=br,
        seed=doc.seed,
        document=doc.model_dump(mode="json"),
        source=source,
    )
    logger.info("scenario loaded: %s N=%d L=%d mechanism=%s", doc.name, spec.n_agents, spec.n_links, doc.mechanism)
    return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ScenarioError(f"scenario file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ScenarioError(f"{p}: top level must be an object")
    return scenario_from_dict(payload, source=str(p))


def apply_overrides(scenario: Scenario, overrides: Mapping[str, Any]) -> Scenario:
    unknown = sorted(set(overrides) - set(OVERRIDE_KEYS))
    if unknown:
        raise ScenarioError(f"unknown override keys: {unknown}")
    if not overrides:
        return scenario
    doc = copy.deepcopy(scenario.document)
    for key, value in overrides.items():
        if key in ("eta", "zeta", "allocation"):
            doc.setdefault("params", {})[key] = value
        elif key in ("n_agents", "n_links"):
            if doc.get("random") is None:
                raise ScenarioError(f"override {key} needs a random scenario")
            doc["random"][key] = int(value)
        elif key == "seed":
            doc["seed"] = int(value)
        else:
            doc["mechanism"] = value
    return scenario_from_dict(doc, source=scenario.source)
