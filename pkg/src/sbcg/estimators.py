"""Variance-reduced estimators of the upper gradient, lower gradient, and
lower function value: recursive momentum for streaming problems and
refresh/correct path integration for finite sums, plus the plain mini-batch
estimator used by the baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import BilevelProblem, ConfigurationError

__all__ = [
    "StormState",
    "storm_init",
    "storm_step",
    "SpiderState",
    "spider_init",
    "spider_step",
    "minibatch_estimate",
    "support_seq_st",
]


@dataclass
class StormState:
    """Recursive-momentum estimates anchored at the previous iterate."""

    prev_point: np.ndarray
    grad_f_est: np.ndarray
    grad_g_est: np.ndarray
    g_val_est: float
    t: int = 0


def storm_init(x0, problem: BilevelProblem, rng_upper, rng_lower,
               batch: int = 1) -> StormState:
    """Single fresh mini-batch estimates at the start point (t = 0)."""
    x0 = np.asarray(x0, dtype=float)
    su = problem.upper.draw(rng_upper, batch)
    sl = problem.lower.draw(rng_lower, batch)
    return StormState(
        prev_point=x0.copy(),
        grad_f_est=problem.upper.grad_at(x0, su),
        grad_g_est=problem.lower.grad_at(x0, sl),
        g_val_est=problem.lower.value_at(x0, sl),
        t=0,
    )


def storm_step(state: StormState, x_t, problem: BilevelProblem,
               rng_upper, rng_lower, alpha_t: float, beta_t: float,
               rho_t: float, batch: int = 1) -> StormState:
    """One recursive-momentum update.

    Each difference term evaluates the same sample at the new and previous
    point, which is what keeps the estimator variance shrinking.  The lower
    value estimate reuses the lower gradient's sample.
    """
    for name, v in (("alpha_t", alpha_t), ("beta_t", beta_t), ("rho_t", rho_t)):
        if not 0 < v <= 1:
            raise ValueError(f"{name} must lie in (0, 1], got {v}")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    x_t = np.asarray(x_t, dtype=float)
    prev = state.prev_point

    su = problem.upper.draw(rng_upper, batch)
    grad_f = ((1.0 - alpha_t) * state.grad_f_est
              + problem.upper.grad_at(x_t, su)
              - (1.0 - alpha_t) * problem.upper.grad_at(prev, su))

    lower = problem.lower
    sl = lower.draw(rng_lower, batch)
    if hasattr(lower, "value_and_grad_at"):
        val_new, g_new = lower.value_and_grad_at(x_t, sl)
        val_prev, g_prev = lower.value_and_grad_at(prev, sl)
    else:
        val_new, g_new = lower.value_at(x_t, sl), lower.grad_at(x_t, sl)
        val_prev, g_prev = lower.value_at(prev, sl), lower.grad_at(prev, sl)
    grad_g = (1.0 - beta_t) * state.grad_g_est + g_new - (1.0 - beta_t) * g_prev
    g_val = (1.0 - rho_t) * state.g_val_est + val_new - (1.0 - rho_t) * val_prev

    return StormState(prev_point=x_t.copy(), grad_f_est=grad_f,
                      grad_g_est=grad_g, g_val_est=float(g_val), t=state.t + 1)


@dataclass
class SpiderState:
    """Path-integrated estimates with periodic exact refreshes.

    Epoch length and batch size are kept per level so upper and lower finite
    sums of different size can refresh on their own schedule.
    """

    prev_point: np.ndarray
    grad_f_est: np.ndarray
    grad_g_est: np.ndarray
    g_val_est: float
    t: int
    q_upper: int
    s_upper: int
    q_lower: int
    s_lower: int


def _default_epoch(n: int) -> int:
    return max(1, int(round(math.sqrt(n))))


def spider_init(x0, problem: BilevelProblem, q_upper: Optional[int] = None,
                s_upper: Optional[int] = None, q_lower: Optional[int] = None,
                s_lower: Optional[int] = None) -> SpiderState:
    """Exact full-pass estimates at the start point (t = 0)."""
    if problem.upper.kind != "finite_sum" or problem.lower.kind != "finite_sum":
        raise ConfigurationError("path-integrated estimator needs finite sums")
    x0 = np.asarray(x0, dtype=float)
    q_u = q_upper or _default_epoch(problem.upper.n_components)
    q_l = q_lower or _default_epoch(problem.lower.n_components)
    return SpiderState(
        prev_point=x0.copy(),
        grad_f_est=problem.upper.full_grad(x0),
        grad_g_est=problem.lower.full_grad(x0),
        g_val_est=problem.lower.full_value(x0),
        t=0,
        q_upper=q_u, s_upper=s_upper or q_u,
        q_lower=q_l, s_lower=s_lower or q_l,
    )


def spider_step(state: SpiderState, x_t, problem: BilevelProblem,
                rng_upper, rng_lower) -> SpiderState:
    """Advance one iteration: exact refresh at epoch starts, otherwise a
    same-batch correction between the previous and current point."""
    x_t = np.asarray(x_t, dtype=float)
    prev = state.prev_point
    t = state.t + 1

    if t % state.q_upper == 0:
        grad_f = problem.upper.full_grad(x_t)
    else:
        su = problem.upper.draw(rng_upper, state.s_upper)
        grad_f = (state.grad_f_est + problem.upper.grad_at(x_t, su)
                  - problem.upper.grad_at(prev, su))

    if t % state.q_lower == 0:
        grad_g = problem.lower.full_grad(x_t)
        g_val = problem.lower.full_value(x_t)
    else:
        sl = problem.lower.draw(rng_lower, state.s_lower)
        grad_g = (state.grad_g_est + problem.lower.grad_at(x_t, sl)
                  - problem.lower.grad_at(prev, sl))
        g_val = (state.g_val_est + problem.lower.value_at(x_t, sl)
                 - problem.lower.value_at(prev, sl))

    return SpiderState(prev_point=x_t.copy(), grad_f_est=grad_f,
                       grad_g_est=grad_g, g_val_est=float(g_val), t=t,
                       q_upper=state.q_upper, s_upper=state.s_upper,
                       q_lower=state.q_lower, s_lower=state.s_lower)


def minibatch_estimate(oracle, x, batch: int, rng):
    """Unbiased batch-mean (value, gradient) from one shared sample.

    A batch covering a whole finite sum short-circuits to the exact full
    pass (zero variance, still unbiased).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if oracle.kind == "finite_sum" and batch >= oracle.n_components:
        return oracle.full_value(x), oracle.full_grad(x)
    sample = oracle.draw(rng, batch)
    if hasattr(oracle, "value_and_grad_at"):
        return oracle.value_and_grad_at(x, sample)
    return oracle.value_at(x, sample), oracle.grad_at(x, sample)


def support_seq_st(t: int, omega: float) -> float:
    """Squared-weight tail sum governing the momentum estimator's decay.

    With rho_k = (k+1)**-omega this evaluates
    ``sum_{tau=2..t} (rho_tau * prod_{k=tau..t} (1 - rho_k))**2``
    through its stable recurrence; the value is bounded by (t+1)**-omega.
    """
    if t < 2:
        raise ValueError("t must be >= 2")
    if not 0 < omega <= 1:
        raise ValueError("omega must lie in (0, 1]")
    rho = 3.0 ** -omega
    s = (rho * (1.0 - rho)) ** 2
    for k in range(3, t + 1):
        rho = float(k + 1) ** -omega
        s = (1.0 - rho) ** 2 * (s + rho * rho)
    return s
