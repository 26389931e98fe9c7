from __future__ import annotations

import os

os.environ.setdefault("DISABLE_DOTENV", "1")

from pathlib import Path

import numpy as np
import pytest

from nashrate.network import NetworkSpec, SampleRanges, ValuationProfile, build_spec, random_instance
from nashrate.solver import KktCertificate, solve_cp


ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
FIXTURES = Path(__file__).resolve().parent / "fixtures"

NARROW = SampleRanges(capacity=(0.8, 1.5), alpha=(0.8, 1.25), a=(1.0, 2.0), b=(0.8, 1.25))


def example_one() -> tuple[NetworkSpec, ValuationProfile]:
    return build_spec([1.0], [[0], [0]]), ValuationProfile(a=(2.0, 1.5), b=(1.0, 1.0))


def chain_three() -> tuple[NetworkSpec, ValuationProfile]:
    return build_spec([1.0, 1.0], [[0], [0, 1], [1]]), ValuationProfile(a=(1.0, 3.0, 1.0), b=(1.0, 1.0, 1.0))


def narrow_instance(seed: int, n_agents: int, n_links: int) -> tuple[NetworkSpec, ValuationProfile]:
    return random_instance(np.random.default_rng(seed), n_agents, n_links, NARROW)


@pytest.fixture
def example1() -> tuple[NetworkSpec, ValuationProfile]:
    return example_one()


@pytest.fixture
def example1_cert(example1) -> KktCertificate:
    spec, vals = example1
    return solve_cp(spec, vals)


@pytest.fixture
def chain() -> tuple[NetworkSpec, ValuationProfile]:
    return chain_three()


@pytest.fixture
def chain_cert(chain) -> KktCertificate:
    spec, vals = chain
    return solve_cp(spec, vals)
