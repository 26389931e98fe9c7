from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

from nashrate.gradients import agent_utility, hessian, one_sided_slopes, utility_gradient
from nashrate.messages import agent_vector, make_profile, with_agent_vector
from nashrate.sbb import SbbParams
from nashrate.wbb import MechanismParams, scale_and_allocate
from tests.conftest import narrow_instance


H = 1e-6


def _utility_at(spec, vals, profile, i, params, mechanism, vec):
    return agent_utility(spec, vals, with_agent_vector(spec, profile, i, vec, mechanism), i, params, mechanism)


def _central(spec, vals, profile, i, params, mechanism, k):
    s = agent_vector(spec, profile, i, mechanism)
    step = np.zeros_like(s)
    step[k] = H
    up = _utility_at(spec, vals, profile, i, params, mechanism, s + step)
    down = _utility_at(spec, vals, profile, i, params, mechanism, s - step)
    return (up - down) / (2 * H)


def _close(analytic: float, numeric: float, rtol: float = 1e-4) -> bool:
    return abs(analytic - numeric) <= rtol * max(1.0, abs(analytic))


@pytest.mark.parametrize("mechanism", ["wbb", "sbb"])
def test_smooth_gradient_matches_differences(example1, mechanism):
    spec, vals = example1
    rho = [0.9, 1.1] if mechanism == "sbb" else None
    profile = make_profile(spec, [0.5, 0.3], np.array([[1.0, 1.5]]), rho=rho)
    params = SbbParams(eta=0.3, zeta=0.7) if mechanism == "sbb" else MechanismParams(eta=0.3)
    for i in range(2):
        grad = utility_gradient(spec, vals, profile, i, params, mechanism)
        assert grad.dy_left == pytest.approx(grad.dy_right)
        vec = grad.vector()
        for k in range(vec.shape[0]):
            assert _close(vec[k], _central(spec, vals, profile, i, params, mechanism, k))


def test_kink_sides(chain):
    spec, vals = chain
    # below the clearing price so the two pieces give different slopes
    profile = make_profile(spec, [0.2, 0.8, 0.2], [0.5, 0.5])
    params = MechanismParams(eta=0.5)
    grad = utility_gradient(spec, vals, profile, 0, params, "wbb")
    assert grad.right.case == "B1"
    assert grad.left is not None and grad.left.case == "A"
    assert grad.right.links == (0, 1)

    s = agent_vector(spec, profile, 0, "wbb")
    step = np.array([H, 0.0])
    base = agent_utility(spec, vals, profile, 0, params, "wbb")
    forward = (_utility_at(spec, vals, profile, 0, params, "wbb", s + step) - base) / H
    backward = (base - _utility_at(spec, vals, profile, 0, params, "wbb", s - step)) / H
    assert _close(grad.dy_right, forward)
    assert _close(grad.dy_left, backward)
    assert not _close(grad.dy_right, grad.dy_left)


def test_single_active_piece(chain):
    spec, _ = chain
    slopes = one_sided_slopes(spec, np.array([0.5, 0.0, 0.3]), 0, "right", MechanismParams())
    assert slopes.case == "B2"
    assert slopes.r == pytest.approx(1 / 1.5)
    assert slopes.dr == pytest.approx(-1 / 2.25)
    assert slopes.beta(0.5) == pytest.approx(0.5 * (-1 / 2.25) + 1 / 1.5)


def test_left_side_undefined_at_zero(example1):
    spec, vals = example1
    profile = make_profile(spec, [0.0, 0.5], 1.0)
    with pytest.raises(ValueError):
        one_sided_slopes(spec, profile.y, 0, "left", MechanismParams())
    grad = utility_gradient(spec, vals, profile, 0, MechanismParams(), "wbb")
    assert grad.dy_left is None
    with pytest.raises(ValueError):
        grad.vector("left")
    with pytest.raises(ValueError):
        hessian(spec, vals, profile, 0, MechanismParams(), "wbb", side="left")


def test_pure_rule_unbounded_at_zero(example1):
    spec, _ = example1
    with pytest.raises(ValueError):
        one_sided_slopes(spec, np.zeros(2), 0, "right", MechanismParams(allocation="pure"))
    corrected = one_sided_slopes(spec, np.zeros(2), 0, "right", MechanismParams())
    assert corrected.r == pytest.approx(1.0)
    assert corrected.dr == pytest.approx(-1.0)


def test_sbb_needs_rho(example1):
    spec, vals = example1
    profile = make_profile(spec, [0.5, 0.5], 1.0)
    with pytest.raises(ValueError):
        utility_gradient(spec, vals, profile, 0, MechanismParams(), "sbb")


@pytest.mark.parametrize("mechanism", ["wbb", "sbb"])
def test_hessian_is_symmetric(example1, mechanism):
    spec, vals = example1
    rho = 1.0 if mechanism == "sbb" else None
    profile = make_profile(spec, [5 / 7, 2 / 7], 7 / 6, rho=rho)
    params = SbbParams() if mechanism == "sbb" else MechanismParams()
    for side in ("right", "left"):
        h = hessian(spec, vals, profile, 0, params, mechanism, side)
        assert h.shape == ((3, 3) if mechanism == "sbb" else (2, 2))
        np.testing.assert_allclose(h, h.T)
        assert h[1, 1] == pytest.approx(-2.0)


@seed(17)
@settings(max_examples=40, deadline=None)
@given(
    rng_seed=st.integers(min_value=0, max_value=10_000),
    demands=st.lists(st.floats(min_value=0.1, max_value=2.0), min_size=3, max_size=3),
    agent=st.integers(min_value=0, max_value=2),
)
def test_price_gradient_matches_differences(rng_seed, demands, agent):
    spec, vals = narrow_instance(rng_seed, 3, 2)
    rng = np.random.default_rng(rng_seed)
    prices = rng.uniform(0.2, 2.0, size=(spec.n_links, spec.n_agents))
    profile = make_profile(spec, demands, prices, rho=rng.uniform(0.5, 1.5, size=3))
    params = SbbParams(eta=0.2, zeta=0.4)
    grad = utility_gradient(spec, vals, profile, agent, params, "sbb")
    vec = grad.vector()
    for k in range(1, vec.shape[0]):
        assert _close(vec[k], _central(spec, vals, profile, agent, params, "sbb", k))


def _smooth_point(spec, y, i, params) -> bool:
    right = one_sided_slopes(spec, y, i, "right", params, kink_rtol=1e-4)
    left = one_sided_slopes(spec, y, i, "left", params, kink_rtol=1e-4)
    return len(right.links) == 1 and right.links == left.links


@pytest.mark.slow
@pytest.mark.parametrize("mechanism", ["wbb", "sbb"])
def test_demand_gradient_matches_differences(mechanism):
    rng = np.random.default_rng(31 if mechanism == "sbb" else 30)
    params = SbbParams(eta=0.2, zeta=0.4) if mechanism == "sbb" else MechanismParams(eta=0.2)
    checked = 0
    cases = set()
    for point in range(500):
        spec, vals = narrow_instance(point, 3, 2)
        i = int(rng.integers(3))
        y = rng.uniform(0.1, 2.0, size=3)
        # some other agents idle so single-sender pieces show up too
        idle = rng.random(3) < 0.3
        idle[i] = False
        y[idle] = 0.0
        prices = rng.uniform(0.2, 2.0, size=(spec.n_links, spec.n_agents))
        rho = rng.uniform(0.5, 1.5, size=3) if mechanism == "sbb" else None
        profile = make_profile(spec, y, prices, rho=rho)
        if not _smooth_point(spec, profile.y, i, params):
            continue
        checked += 1
        grad = utility_gradient(spec, vals, profile, i, params, mechanism)
        assert _close(grad.dy_right, _central(spec, vals, profile, i, params, mechanism, 0))

        up, down = profile.y.copy(), profile.y.copy()
        up[i] += H
        down[i] -= H
        dx = (scale_and_allocate(spec, up)[2][i] - scale_and_allocate(spec, down)[2][i]) / (2 * H)
        cases.add(grad.right.case)
        assert _close(grad.right.beta(float(profile.y[i])), dx)
    assert checked >= 300
    assert {"B1", "B2"} <= cases
