from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Optional

import numpy as np

from nashrate.config import settings
from nashrate.network import NetworkSpec, ValuationProfile, link_loads, welfare
from nashrate.types import StepRule


logger = logging.getLogger("nashrate.solver")

_MAX_BACKTRACKS = 60
_BB_MIN = 1e-10
_BB_MAX = 1e10
_STALL_RTOL = 1e-14
_POLISH_GATE = 1e-5
_POLISH_STEPS = 30


@dataclass
class SolverConfig:
    tolerance: float = field(default_factory=lambda: settings.SOLVER_TOLERANCE)
    max_iterations: int = field(default_factory=lambda: settings.SOLVER_MAX_ITERATIONS)
    step_rule: StepRule = "armijo"
    initial_multiplier: float = field(default_factory=lambda: settings.SOLVER_INITIAL_MULTIPLIER)
    initial_step: float = 1.0

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError(f"solver tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.initial_multiplier > 0:
            raise ValueError("initial multiplier must be positive")
        if self.step_rule not in ("armijo", "diminishing"):
            raise ValueError(f"unknown step rule: {self.step_rule}")


@dataclass(frozen=True)
class KktResiduals:
    primal: float
    dual: float
    comp_slack: float
    stationarity: float
    tolerance: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.within(self.tolerance)

    def max(self) -> float:
        return max(self.primal, self.dual, self.comp_slack, self.stationarity)

    def within(self, tol: float) -> bool:
        return self.max() <= tol

    def to_dict(self) -> dict[str, float]:
        return {
            "primal": self.primal,
            "dual": self.dual,
            "comp_slack": self.comp_slack,
            "stationarity": self.stationarity,
        }


@dataclass(frozen=True)
class KktCertificate:
    x_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    residuals: KktResiduals
    iterations: int
    objective: float
    optimal: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "x_star": [float(v) for v in self.x_star],
            "lambda_star": [float(v) for v in self.lambda_star],
            "nu_star": [float(v) for v in self.nu_star],
            "residuals": self.residuals.to_dict(),
            "iterations": self.iterations,
            "objective": self.objective,
            "optimal": self.optimal,
        }


class SolverError(RuntimeError):
    def __init__(self, message: str, *, x: np.ndarray, multipliers: np.ndarray, residuals: KktResiduals, iterations: int) -> None:
        super().__init__(message)
        self.x = x
        self.multipliers = multipliers
        self.residuals = residuals
        self.iterations = iterations


def check_kkt(spec: NetworkSpec, valuations: ValuationProfile, x: np.ndarray, lam: np.ndarray, tol: float = 1e-8) -> KktResiduals:
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if x.shape != (spec.n_agents,):
        raise ValueError(f"allocation has shape {x.shape}, expected ({spec.n_agents},)")
    if lam.shape != (spec.n_links,):
        raise ValueError(f"multipliers have shape {lam.shape}, expected ({spec.n_links},)")
    if valuations.n_agents != spec.n_agents:
        raise ValueError("valuation profile and network disagree on the number of agents")

    excess = link_loads(spec, x) - spec.capacity
    primal = max(float(np.max(excess, initial=0.0)), float(np.max(-x, initial=0.0)))
    dual = float(np.max(-lam, initial=0.0))
    comp = float(np.max(np.abs(lam * excess), initial=0.0))

    # v' is evaluated on the clipped point
    marginal = valuations.d1s(np.maximum(x, 0.0))
    price = spec.alpha.T @ lam
    gap = np.where(x > 0, np.abs(marginal - price), np.maximum(0.0, marginal - price))
    stat = float(np.max(gap, initial=0.0))
    return KktResiduals(primal=primal, dual=dual, comp_slack=comp, stationarity=stat, tolerance=float(tol))


def _dual_value(spec: NetworkSpec, valuations: ValuationProfile, lam: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    mu = spec.alpha.T @ lam
    if np.any(mu <= 0):
        return math.inf, np.full(spec.n_agents, math.inf), mu
    x = valuations.inverse_d1(mu)
    value = welfare(valuations, x) - float(mu @ x) + float(lam @ spec.capacity)
    return value, x, mu


def _polish(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    x: np.ndarray,
    lam: np.ndarray,
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Newton steps on the multipliers of the links that look binding.

    Links whose multiplier exceeds their load residual are held at equality;
    every other multiplier is set to zero.
    """
    excess = link_loads(spec, x) - spec.capacity
    bound = lam > np.abs(excess)
    if not np.any(bound):
        return None
    rows = spec.alpha[bound]
    caps = spec.capacity[bound]
    out = np.where(bound, lam, 0.0)
    for _ in range(_POLISH_STEPS):
        mu = spec.alpha.T @ out
        if np.any(mu <= 0):
            return None
        px = valuations.inverse_d1(mu)
        resid = rows @ px - caps
        if float(np.max(np.abs(resid))) <= 1e-15 * max(1.0, float(np.max(caps))):
            return px, out
        slope = np.where(px > 0, -valuations.a_vec / mu**2, 0.0)
        jac = (rows * slope[None, :]) @ rows.T
        try:
            delta = np.linalg.solve(jac, resid)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(delta)):
            return None
        out = out.copy()
        out[bound] -= delta
    mu = spec.alpha.T @ out
    if np.any(mu <= 0):
        return None
    return valuations.inverse_d1(mu), out


def _polished(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    x: np.ndarray,
    lam: np.ndarray,
    res: KktResiduals,
) -> Optional[tuple[np.ndarray, np.ndarray, KktResiduals]]:
    if res.max() > _POLISH_GATE:
        return None
    polished = _polish(spec, valuations, x, lam)
    if polished is None:
        return None
    px, plam = polished
    if np.any(plam < 0):
        return None
    pres = check_kkt(spec, valuations, px, plam, res.tolerance)
    if not pres.max() < res.max():
        return None
    logger.debug("active-set polish: max residual %.3g -> %.3g", res.max(), pres.max())
    return px, plam, pres


def solve_cp(spec: NetworkSpec, valuations: ValuationProfile, config: Optional[SolverConfig] = None) -> KktCertificate:
    config = config or SolverConfig()
    if valuations.n_agents != spec.n_agents:
        raise ValueError("valuation profile and network disagree on the number of agents")

    lam = np.full(spec.n_links, float(config.initial_multiplier))
    value, x, _ = _dual_value(spec, valuations, lam)
    grad = spec.capacity - link_loads(spec, x)
    step = config.initial_step
    prev_lam: Optional[np.ndarray] = None
    prev_grad: Optional[np.ndarray] = None

    rule = config.step_rule
    base_step = config.initial_step
    last_good = config.initial_step
    restart = 0

    best = (math.inf, x, lam)
    res = check_kkt(spec, valuations, x, lam, config.tolerance)
    iterations = 0
    for k in range(config.max_iterations):
        iterations = k
        res = check_kkt(spec, valuations, x, lam, config.tolerance)
        score = max(res.primal, res.comp_slack)
        if score < best[0]:
            best = (score, x, lam)
        if res.within(config.tolerance):
            break

        if rule == "armijo":
            if prev_lam is not None and prev_grad is not None:
                s = lam - prev_lam
                g = grad - prev_grad
                sg = float(s @ g)
                if sg > 0:
                    step = min(max(float(s @ s) / sg, _BB_MIN), _BB_MAX)
            trial_step = step
            accepted = False
            for _ in range(_MAX_BACKTRACKS):
                cand = np.maximum(lam - trial_step * grad, 0.0)
                cand_value, cand_x, _ = _dual_value(spec, valuations, cand)
                d = cand - lam
                bound = value + float(grad @ d) + float(d @ d) / (2.0 * trial_step)
                if cand_value <= bound:
                    accepted = True
                    break
                trial_step *= 0.5
            moved = float(np.max(np.abs(cand - lam), initial=0.0)) > _STALL_RTOL * (1.0 + float(np.max(lam, initial=0.0)))
            if accepted and moved:
                last_good = trial_step
            else:
                # no movement: continue with diminishing steps
                rule = "diminishing"
                base_step = min(config.initial_step, last_good)
                restart = k
                logger.debug("dual line search stalled at iteration %d; diminishing steps from %.3g", k, base_step)
                polished = _polished(spec, valuations, x, lam, res)
                if polished is not None and polished[2].within(config.tolerance):
                    x, lam, res = polished
                    break
        if rule == "diminishing":
            trial_step = base_step / math.sqrt(k - restart + 1.0)
            for _ in range(_MAX_BACKTRACKS):
                cand = np.maximum(lam - trial_step * grad, 0.0)
                cand_value, cand_x, _ = _dual_value(spec, valuations, cand)
                if math.isfinite(cand_value):
                    break
                trial_step *= 0.5

        prev_lam, prev_grad = lam, grad
        lam, x, value = cand, cand_x, cand_value
        grad = spec.capacity - link_loads(spec, x)
        if k % 1000 == 0:
            logger.debug("dual iteration %d: value=%.12g step=%.3g", k, value, trial_step)
    else:
        iterations = config.max_iterations

    res = check_kkt(spec, valuations, x, lam, config.tolerance)
    polished = _polished(spec, valuations, x, lam, res)
    if polished is not None:
        x, lam, res = polished
    if not res.within(config.tolerance):
        _, bx, blam = best
        bres = check_kkt(spec, valuations, bx, blam, config.tolerance)
        logger.warning("solver did not converge: residuals=%s iterations=%d", bres.to_dict(), iterations)
        raise SolverError(
            f"dual ascent did not reach tolerance {config.tolerance:g} in {iterations} iterations",
            x=bx,
            multipliers=blam,
            residuals=bres,
            iterations=iterations,
        )

    nu = np.maximum(0.0, spec.alpha.T @ lam - valuations.d1s(x))
    cert = KktCertificate(
        x_star=x,
        lambda_star=lam,
        nu_star=nu,
        residuals=res,
        iterations=iterations,
        objective=welfare(valuations, x),
        optimal=True,
    )
    logger.info("solved: objective=%.10g iterations=%d max_residual=%.3g", cert.objective, iterations, res.max())
    return cert


def _face_search(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    binding: tuple[int, ...],
    dependent: tuple[int, ...],
    axes: list[np.ndarray],
) -> tuple[float, Optional[np.ndarray]]:
    """Best grid point on the face where every link in binding is full.

    Free agents walk the axes; the dependent agents are solved from the
    binding rows.
    """
    free = [j for j in range(spec.n_agents) if j not in dependent]
    if free:
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
    else:
        pts = np.zeros((1, 0))

    rows = spec.alpha[list(binding)]
    rhs = spec.capacity[list(binding)][None, :] - pts @ rows[:, free].T
    dep = np.linalg.solve(rows[:, list(dependent)], rhs.T).T

    full = np.zeros((pts.shape[0], spec.n_agents))
    full[:, free] = pts
    full[:, list(dependent)] = dep
    loads = full @ spec.alpha.T
    ok = np.all(full >= -1e-12, axis=1) & np.all(loads <= spec.capacity[None, :] + 1e-12, axis=1)
    if not np.any(ok):
        return -math.inf, None
    full = np.maximum(full, 0.0)
    objective = np.sum(valuations.a_vec * np.log1p(valuations.b_vec * full), axis=1)
    objective = np.where(ok, objective, -np.inf)
    best = int(np.argmax(objective))
    return float(objective[best]), full[best]


def _faces(spec: NetworkSpec) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    out = []
    for size in range(1, min(spec.n_links, spec.n_agents) + 1):
        for binding in combinations(range(spec.n_links), size):
            for dependent in combinations(range(spec.n_agents), size):
                block = spec.alpha[np.ix_(binding, dependent)]
                if abs(float(np.linalg.det(block))) > 1e-9:
                    out.append((binding, dependent))
    return out


def brute_force_cp(
    spec: NetworkSpec,
    valuations: ValuationProfile,
    grid_step: float = 1e-3,
    *,
    coarse_cells: int = 64,
    window: int = 12,
    refine: int = 64,
) -> np.ndarray:
    """Grid search for small instances.

    The optimum fills at least one link, so the search walks the faces of
    the feasible set: for each choice of full links, the free agents walk a
    grid and the remaining agents are solved from the full rows. Each pass
    re-centres a window of window cells on the best point and quarters the
    step, until the step is at most grid_step / refine.
    """
    if spec.n_agents > 3:
        raise ValueError(f"brute-force oracle supports at most 3 agents, got {spec.n_agents}")
    if not grid_step > 0:
        raise ValueError("grid step must be positive")

    alpha = spec.alpha
    upper = np.array(
        [float(np.min(spec.capacity[alpha[:, i] > 0] / alpha[alpha[:, i] > 0, i])) for i in range(spec.n_agents)]
    )
    finest = grid_step / refine

    best_val, best_x = -math.inf, np.zeros(spec.n_agents)
    for binding, dependent in _faces(spec):
        free = [j for j in range(spec.n_agents) if j not in dependent]
        if not free:
            val, fx = _face_search(spec, valuations, binding, dependent, [])
            if fx is not None and val > best_val:
                best_val, best_x = val, fx
            continue
        step = float(np.max(upper[free])) / coarse_cells
        axes = [np.append(np.arange(0.0, upper[j], step), upper[j]) for j in free]
        val, fx = _face_search(spec, valuations, binding, dependent, axes)
        if fx is None:
            continue
        while step > finest:
            span = window * step
            step /= 4.0
            axes = []
            for j in free:
                lo = max(0.0, float(fx[j]) - span)
                hi = min(float(upper[j]), float(fx[j]) + span)
                axes.append(np.append(np.arange(lo, hi, step), [hi, float(fx[j])]))
            new_val, new_x = _face_search(spec, valuations, binding, dependent, axes)
            if new_x is not None and new_val >= val:
                val, fx = new_val, new_x
        if val > best_val:
            best_val, best_x = val, fx
    logger.debug("brute force: objective=%.10g x=%s", best_val, best_x)
    return best_x
