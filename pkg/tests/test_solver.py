from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from nashrate.network import NetworkSpec, SampleRanges, ValuationProfile, build_spec, link_loads, random_instance, welfare
from nashrate.solver import KktResiduals, SolverConfig, SolverError, brute_force_cp, check_kkt, solve_cp
from tests.conftest import NARROW, narrow_instance


def _single_link_oracle(capacity: float, alpha: np.ndarray, vals: ValuationProfile) -> np.ndarray:
    a, b = vals.a_vec, vals.b_vec

    def demand(lam: float) -> np.ndarray:
        return np.maximum(a / (alpha * lam) - 1.0 / b, 0.0)

    lam = brentq(lambda t: float(alpha @ demand(t)) - capacity, 1e-9, 1e6, xtol=1e-15, rtol=1e-15)
    return demand(lam)


def test_example_allocation_and_price(example1_cert):
    cert = example1_cert
    np.testing.assert_allclose(cert.x_star, [5.0 / 7.0, 2.0 / 7.0], atol=1e-7)
    np.testing.assert_allclose(cert.lambda_star, [7.0 / 6.0], atol=1e-7)
    assert cert.optimal
    assert cert.residuals.max() <= 1e-8
    np.testing.assert_allclose(cert.nu_star, [0.0, 0.0], atol=1e-8)


def test_example_matches_root_finder(example1, example1_cert):
    spec, vals = example1
    x = _single_link_oracle(1.0, spec.alpha[0], vals)
    np.testing.assert_allclose(example1_cert.x_star, x, atol=1e-7)


def test_chain_allocation(chain_cert):
    np.testing.assert_allclose(chain_cert.x_star, [0.2, 0.8, 0.2], atol=1e-7)
    np.testing.assert_allclose(chain_cert.lambda_star, [1 / 1.2, 1 / 1.2], atol=1e-7)


def test_objective_is_welfare(example1, example1_cert):
    _, vals = example1
    assert example1_cert.objective == pytest.approx(welfare(vals, example1_cert.x_star))


def test_certificate_to_dict_is_plain(example1_cert):
    payload = example1_cert.to_dict()
    assert set(payload) == {"x_star", "lambda_star", "nu_star", "residuals", "iterations", "objective", "optimal"}
    assert all(isinstance(v, float) for v in payload["x_star"])
    assert set(payload["residuals"]) == {"primal", "dual", "comp_slack", "stationarity"}


def test_diminishing_step_rule(example1):
    spec, vals = example1
    cert = solve_cp(spec, vals, SolverConfig(step_rule="diminishing", tolerance=1e-7))
    np.testing.assert_allclose(cert.x_star, [5.0 / 7.0, 2.0 / 7.0], atol=1e-6)


def test_coefficients_shift_allocation():
    spec = build_spec([1.0], [[0], [0]], {(0, 0): 2.0})
    vals = ValuationProfile(a=(2.0, 1.5), b=(1.0, 1.0))
    cert = solve_cp(spec, vals)
    np.testing.assert_allclose(cert.x_star, _single_link_oracle(1.0, spec.alpha[0], vals), atol=1e-7)
    assert float(link_loads(spec, cert.x_star)[0]) == pytest.approx(1.0, abs=1e-8)


def test_zero_component_optimum():
    spec = build_spec([1.0], [[0], [0]])
    vals = ValuationProfile(a=(5.0, 0.1), b=(1.0, 1.0))
    cert = solve_cp(spec, vals)
    np.testing.assert_allclose(cert.x_star, [1.0, 0.0], atol=1e-7)
    assert cert.nu_star[1] > 0


def test_non_convergence_raises(example1):
    spec, vals = example1
    with pytest.raises(SolverError) as err:
        solve_cp(spec, vals, SolverConfig(max_iterations=1, tolerance=1e-12))
    assert err.value.iterations == 1
    assert not err.value.residuals.within(1e-12)
    assert err.value.x.shape == (2,)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(step_rule="newton")  # type: ignore[arg-type]


def test_agent_count_mismatch(example1):
    spec, _ = example1
    with pytest.raises(ValueError):
        solve_cp(spec, ValuationProfile(a=(1.0,), b=(1.0,)))


def test_check_kkt_residuals(example1):
    spec, vals = example1
    good = check_kkt(spec, vals, np.array([5 / 7, 2 / 7]), np.array([7 / 6]))
    assert good.passed
    over = check_kkt(spec, vals, np.array([1.0, 1.0]), np.array([7 / 6]))
    assert over.primal == pytest.approx(1.0)
    assert over.comp_slack == pytest.approx(7 / 6)
    negative = check_kkt(spec, vals, np.array([5 / 7, 2 / 7]), np.array([-1.0]))
    assert negative.dual == pytest.approx(1.0)


def test_check_kkt_hinge_at_zero():
    spec = build_spec([1.0], [[0], [0]])
    vals = ValuationProfile(a=(5.0, 0.1), b=(1.0, 1.0))
    res = check_kkt(spec, vals, np.array([1.0, 0.0]), np.array([2.5]))
    assert res.stationarity == pytest.approx(0.0, abs=1e-12)
    starved = check_kkt(spec, vals, np.array([1.0, 0.0]), np.array([0.05]))
    assert starved.stationarity > 0


def test_check_kkt_shape_mismatch(example1):
    spec, vals = example1
    with pytest.raises(ValueError):
        check_kkt(spec, vals, np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        check_kkt(spec, vals, np.zeros(2), np.zeros(2))


def test_residuals_helpers():
    res = KktResiduals(primal=1e-9, dual=0.0, comp_slack=3e-9, stationarity=2e-9)
    assert res.max() == 3e-9
    assert res.passed
    assert not res.within(1e-9)


def test_brute_force_example(example1):
    spec, vals = example1
    x = brute_force_cp(spec, vals, grid_step=1e-4)
    np.testing.assert_allclose(x, [5.0 / 7.0, 2.0 / 7.0], atol=1e-3)


def test_brute_force_rejects_large_networks():
    spec, vals = narrow_instance(0, 4, 1)
    with pytest.raises(ValueError):
        brute_force_cp(spec, vals)


@pytest.mark.parametrize("rng_seed", range(10))
def test_random_single_link_matches_root_finder(rng_seed):
    spec, vals = narrow_instance(rng_seed, 3, 1)
    cert = solve_cp(spec, vals)
    oracle = _single_link_oracle(float(spec.capacity[0]), spec.alpha[0], vals)
    np.testing.assert_allclose(cert.x_star, oracle, atol=1e-6)


def _assert_matches_grid(rng_seed: int, n_agents: int, n_links: int) -> None:
    spec, vals = narrow_instance(rng_seed, n_agents, n_links)
    cert = solve_cp(spec, vals)
    assert cert.residuals.primal <= 1e-8
    grid_x = brute_force_cp(spec, vals, grid_step=1e-3)
    grid_welfare = welfare(vals, grid_x)
    assert cert.objective >= grid_welfare - 1e-9
    assert cert.objective - grid_welfare <= 1e-4
    assert float(np.max(np.abs(cert.x_star - grid_x))) <= 2 * 1e-3


@pytest.mark.parametrize("rng_seed", range(10))
def test_random_network_matches_grid(rng_seed):
    _assert_matches_grid(rng_seed, 3, 2)


@pytest.mark.slow
@seed(2024)
@settings(max_examples=50, deadline=None)
@given(
    rng_seed=st.integers(min_value=0, max_value=2**32 - 1),
    n_agents=st.integers(min_value=2, max_value=3),
    n_links=st.integers(min_value=1, max_value=2),
)
def test_grid_oracle_property(rng_seed, n_agents, n_links):
    _assert_matches_grid(rng_seed, n_agents, n_links)


@pytest.mark.slow
@pytest.mark.parametrize("rng_seed", range(200))
def test_small_networks_match_grid(rng_seed):
    _assert_matches_grid(rng_seed, 2 + rng_seed % 2, 1 + (rng_seed // 2) % 2)


@pytest.mark.slow
@pytest.mark.parametrize("ranges", [NARROW, SampleRanges()], ids=["narrow", "default"])
@pytest.mark.parametrize("rng_seed", range(200))
def test_random_instances_converge(rng_seed, ranges):
    rng = np.random.default_rng(rng_seed)
    spec, vals = random_instance(rng, 2 + rng_seed % 2, 1 + (rng_seed // 2) % 2, ranges)
    cert = solve_cp(spec, vals)
    assert cert.optimal
    assert cert.residuals.max() <= 1e-8
    assert np.all(cert.x_star >= 0)
    assert np.all(link_loads(spec, cert.x_star) <= spec.capacity + 1e-8)


def test_polished_example_is_exact(example1_cert):
    assert example1_cert.residuals.max() <= 1e-12
    np.testing.assert_allclose(example1_cert.x_star, [5.0 / 7.0, 2.0 / 7.0], atol=1e-12)


def _scaled_capacity(spec: NetworkSpec, factor: float) -> NetworkSpec:
    links = [dataclasses.replace(link, capacity=link.capacity * factor) for link in spec.links]
    return NetworkSpec(n_agents=spec.n_agents, links=tuple(links), routes=spec.routes)


@pytest.mark.parametrize("rng_seed", range(10))
def test_more_capacity_raises_welfare(rng_seed):
    spec, vals = narrow_instance(rng_seed, 3, 2)
    base = solve_cp(spec, vals)
    wider = solve_cp(_scaled_capacity(spec, 1.5), vals)
    assert wider.objective > base.objective + 1e-6


@pytest.mark.parametrize("rng_seed", range(10))
def test_starting_multiplier_does_not_matter(rng_seed):
    spec, vals = narrow_instance(rng_seed, 3, 2)
    low = solve_cp(spec, vals, SolverConfig(initial_multiplier=0.05))
    high = solve_cp(spec, vals, SolverConfig(initial_multiplier=5.0))
    np.testing.assert_allclose(low.x_star, high.x_star, atol=1e-6)
    assert low.objective == pytest.approx(high.objective, abs=1e-8)
