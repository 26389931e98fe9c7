from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

from nashrate.messages import make_profile
from nashrate.network import random_instance
from nashrate.sbb import (
    SbbParams,
    avg_rho_excluding,
    outcome_sbb,
    redistribution_matrix,
    redistribution_total,
    tax_components_sbb,
    tax_sbb,
    total_payment,
)
from nashrate.wbb import scale_and_allocate
from tests.conftest import narrow_instance


def test_example_taxes_balance(example1):
    spec, vals = example1
    profile = make_profile(spec, [5 / 7, 2 / 7], 7 / 6, rho=1.0)
    t = tax_sbb(spec, profile, SbbParams(eta=1.0, zeta=1.0))
    np.testing.assert_allclose(t, [0.5, -0.5], atol=1e-12)
    out = outcome_sbb(spec, vals, profile, SbbParams())
    assert out.budget_residual == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(out.u, vals.values(out.x) - out.t)


def test_redistribution_ignores_own_message(chain):
    spec, _ = chain
    base = make_profile(spec, [0.2, 0.8, 0.2], [1.0, 2.0], rho=[1.0, 0.5, 2.0])
    moved = make_profile(spec, [0.2, 3.0, 0.2], np.array([[1.0, 9.0, 0.0], [0.0, 0.1, 2.0]]), rho=[1.0, 7.0, 2.0])
    np.testing.assert_allclose(redistribution_matrix(spec, base)[:, 1], redistribution_matrix(spec, moved)[:, 1])
    assert not np.allclose(redistribution_matrix(spec, base)[:, 0], redistribution_matrix(spec, moved)[:, 0])


def test_redistribution_value(example1):
    spec, _ = example1
    profile = make_profile(spec, [0.5, 0.25], 2.0, rho=[3.0, 1.0])
    red = redistribution_matrix(spec, profile)
    # agent 0 sees rho-bar 1, p-bar 2 and the other demand 0.25
    np.testing.assert_allclose(red, [[-0.5, -3.0]])
    assert redistribution_total(spec, profile) == pytest.approx(-3.5)


def test_rho_penalty(example1):
    spec, _ = example1
    profile = make_profile(spec, [0.5, 0.5], 1.0, rho=[0.5, 1.0])
    parts = tax_components_sbb(spec, profile, SbbParams(zeta=2.0))
    np.testing.assert_allclose(parts.rho_penalty, [0.5, 0.0])


def test_rho_penalty_at_zero_demand(example1):
    spec, _ = example1
    profile = make_profile(spec, [0.0, 0.0], 1.0, rho=[0.5, 0.0])
    parts = tax_components_sbb(spec, profile, SbbParams(zeta=1.0))
    np.testing.assert_allclose(parts.rho_penalty, [0.25, 0.0])
    np.testing.assert_allclose(parts.payment, [0.0, 0.0])


def test_average_rho():
    profile = make_profile(narrow_instance(0, 3, 1)[0], [1, 1, 1], 1.0, rho=[1.0, 2.0, 3.0])
    assert avg_rho_excluding(profile, 0) == pytest.approx(2.5)
    assert avg_rho_excluding(profile, 2) == pytest.approx(1.5)


def test_missing_rho_rejected(example1):
    spec, _ = example1
    profile = make_profile(spec, [0.5, 0.5], 1.0)
    with pytest.raises(ValueError):
        tax_sbb(spec, profile, SbbParams())
    with pytest.raises(ValueError):
        avg_rho_excluding(profile, 0)


def test_params_validation():
    with pytest.raises(ValueError):
        SbbParams(zeta=0.0)
    with pytest.raises(ValueError):
        SbbParams(eta=-1.0)


def test_payment_forms_agree(chain):
    spec, _ = chain
    profile = make_profile(spec, [0.3, 0.9, 0.4], [1.5, 0.7], rho=1.0)
    x_form, ry_form = total_payment(spec, profile)
    assert x_form == pytest.approx(ry_form)


@seed(5)
@settings(max_examples=60, deadline=None)
@given(
    rng_seed=st.integers(min_value=0, max_value=10_000),
    demands=st.lists(st.floats(min_value=0.01, max_value=5.0), min_size=4, max_size=4),
    prices=st.lists(st.floats(min_value=0.0, max_value=5.0), min_size=2, max_size=2),
)
def test_budget_balances_at_common_prices(rng_seed, demands, prices):
    spec, vals = narrow_instance(rng_seed, 4, 2)
    r, _, _ = scale_and_allocate(spec, np.array(demands))
    profile = make_profile(spec, demands, prices, rho=r)
    out = outcome_sbb(spec, vals, profile, SbbParams(eta=0.5, zeta=0.5))
    scale = 1.0 + float(np.sum(np.abs(out.t)))
    assert abs(out.budget_residual) <= 1e-10 * scale


@pytest.mark.slow
def test_budget_balances_over_many_samples():
    rng = np.random.default_rng(123)
    params = SbbParams(eta=0.5, zeta=0.5)
    for _ in range(1000):
        spec, vals = random_instance(rng, int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        y = rng.uniform(0.01, 5.0, size=spec.n_agents)
        y[rng.random(spec.n_agents) < 0.2] = 0.0
        prices = rng.uniform(0.0, 5.0, size=spec.n_links)
        r, _, _ = scale_and_allocate(spec, y)
        profile = make_profile(spec, y, prices, rho=r)
        out = outcome_sbb(spec, vals, profile, params)
        assert abs(float(np.sum(out.t))) <= 1e-10
