"""Cutting-plane conditional-gradient solvers for stochastic simple bilevel
problems, their no-slack ablation variants, the warm start, single-level
conditional-gradient runs, and two projected-gradient baselines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .core import (
    BilevelProblem,
    ConfigurationError,
    KtSchedule,
    MetricsRecord,
    ReferenceValues,
    cut_contains,
    evaluate_metrics,
    make_cut_plane,
)
from .estimators import (
    SpiderState,
    StormState,
    minibatch_estimate,
    spider_init,
    spider_step,
    storm_init,
    storm_step,
)
from .sets import InfeasibleCutError, constrained_lmo

__all__ = [
    "Schedule",
    "SolverConfig",
    "RunTrace",
    "WarmStartFailureError",
    "warm_start_x0",
    "sbcgi_run",
    "sbcgf_run",
    "sbcg_m_run",
    "fw_single_level_run",
    "aripseg_run",
    "dbgd_sto_run",
    "iterations_for_budget",
]


class WarmStartFailureError(RuntimeError):
    def __init__(self, gap, budget):
        super().__init__(f"warm start gap {gap:.3e} exceeds target after "
                         f"{budget} queries")
        self.gap = gap


@dataclass(frozen=True)
class Schedule:
    """Scalar schedule coeff/(t+1)**power; power 0 gives a constant."""

    coeff: float
    power: float = 0.0

    def value(self, t: int) -> float:
        if self.power == 0.0:
            return self.coeff
        return self.coeff * float(t + 1) ** -self.power


@dataclass(frozen=True)
class SolverConfig:
    """Run-level knobs shared by all solvers.

    ``gamma`` is the combination-step schedule (evaluated at t+1 for the
    update at iteration t); ``momentum`` overrides the default
    (t+1)**-omega schedule for the recursive-momentum weights; ``kt`` picks
    the cut-slack rule.  Spider epoch/batch sizes default to sqrt(n) per
    level when left unset.
    """

    horizon: int
    eps_f: float = 1e-2
    eps_g: float = 1e-2
    delta: float = 0.1
    omega: float = 1.0
    gamma: Schedule = Schedule(1.0, 1.0)
    momentum: Optional[Schedule] = None
    batch: int = 1
    spider_q_upper: Optional[int] = None
    spider_s_upper: Optional[int] = None
    spider_q_lower: Optional[int] = None
    spider_s_lower: Optional[int] = None
    kt: KtSchedule = KtSchedule()
    seed: int = 0
    warm_start_budget: int = 100_000
    warm_start_gamma: Schedule = Schedule(0.1, 1.0)
    log_points: int = 500
    track_fw_gap: str = "off"  # off | surrogate | exact
    streaming_value_batch: Optional[int] = None
    measure_time: bool = False

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigurationError("horizon must be nonnegative")
        if not (self.eps_f > 0 and self.eps_g > 0):
            raise ConfigurationError("target accuracies must be positive")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.batch < 1:
            raise ConfigurationError("batch must be >= 1")
        if self.track_fw_gap not in ("off", "surrogate", "exact"):
            raise ConfigurationError(f"unknown fw-gap mode {self.track_fw_gap}")

    def value_batch(self) -> int:
        if self.streaming_value_batch is not None:
            return self.streaming_value_batch
        return min(int(math.ceil(self.eps_g ** -2)), 10 ** 6)


@dataclass
class RunTrace:
    """Ordered per-iteration records plus the final iterate and status."""

    records: List[MetricsRecord]
    final_x: np.ndarray
    status: str = "completed"
    cut_fallbacks: int = 0
    probe_violations: int = 0
    algorithm: str = ""

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def _spawn_rngs(seed, n=4):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def _cadence(horizon: int, log_points: int) -> int:
    return max(1, math.ceil(horizon / max(1, log_points)))


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled
        self.start = time.perf_counter() if enabled else 0.0

    def ms(self):
        return (time.perf_counter() - self.start) * 1e3 if self.enabled else 0.0


def _record(x, problem, refs, config, task, iteration, queries, rng_eval,
            clock, fallbacks, fw_surrogate=math.nan):
    rec = evaluate_metrics(
        x, problem, refs, task, iteration=iteration, oracle_queries=queries,
        compute_fw_gap=(config.track_fw_gap == "exact"),
        value_batch=config.value_batch(), eval_rng=rng_eval)
    if config.track_fw_gap == "surrogate":
        rec.fw_gap = fw_surrogate
    rec.wall_ms = clock.ms()
    rec.cut_fallback_count = fallbacks
    return rec


def _run_bilevel_cg(problem, config, x0, refs, *, estimator, algorithm,
                    kt_zero=False, fallback=False, probe=None, task=None):
    if not problem.set.contains(np.asarray(x0, dtype=float), 1e-9):
        raise ConfigurationError("x0 lies outside the feasible set")
    if not np.isfinite(refs.g_x0):
        raise ConfigurationError("refs.g_x0 must be set before running")
    rng_u, rng_l, rng_eval, _ = _spawn_rngs(config.seed)
    x = np.array(x0, dtype=float)
    T = config.horizon
    cadence = _cadence(T, config.log_points)
    clock = _Clock(config.measure_time)
    queries = 0
    fallbacks = 0
    probe_viol = 0
    surrogate = math.nan
    state = None
    status = "completed"

    if estimator == "spider":
        n_u = problem.upper.n_components
        n_l = problem.lower.n_components

    records = [_record(x, problem, refs, config, task, 0, queries, rng_eval,
                       clock, fallbacks)]
    lmo_hint = {}
    t_done = 0
    for t in range(T):
        if estimator == "storm":
            if state is None:
                state = storm_init(x, problem, rng_u, rng_l, config.batch)
                queries += 2 * config.batch
            else:
                mom = (config.momentum.value(t) if config.momentum is not None
                       else float(t + 1) ** -config.omega)
                state = storm_step(state, x, problem, rng_u, rng_l,
                                   mom, mom, mom, config.batch)
                queries += 4 * config.batch
            k_t = 0.0 if kt_zero else config.kt.for_sbcgi(
                problem.constants, t, config.delta, problem.dimension,
                config.omega, T)
        else:
            if state is None:
                state = spider_init(x, problem, config.spider_q_upper,
                                    config.spider_s_upper,
                                    config.spider_q_lower,
                                    config.spider_s_lower)
                queries += n_u + n_l
            else:
                state = spider_step(state, x, problem, rng_u, rng_l)
                queries += (n_u if state.t % state.q_upper == 0
                            else 2 * state.s_upper)
                queries += (n_l if state.t % state.q_lower == 0
                            else 2 * state.s_lower)
            k_t = 0.0 if kt_zero else config.kt.for_sbcgf(
                problem.constants, t, config.gamma.value(t + 1), config.delta,
                max(T, 2))

        plane = make_cut_plane(state.grad_g_est, state.g_val_est, refs.g_x0,
                               k_t, x)
        if probe is not None and not cut_contains(plane, probe, 1e-12):
            probe_viol += 1
        try:
            s = constrained_lmo(problem.set, state.grad_f_est, plane, lmo_hint)
        except InfeasibleCutError:
            if not fallback:
                status = "infeasible-cut"
                break
            s = problem.set.lmo(state.grad_g_est)
            fallbacks += 1
        if config.track_fw_gap == "surrogate":
            surrogate = float(state.grad_f_est @ (x - s))
        gamma = config.gamma.value(t + 1)
        if not 0.0 < gamma <= 1.0:
            raise ConfigurationError(f"gamma schedule left (0,1]: {gamma}")
        x = (1.0 - gamma) * x + gamma * s
        t_done = t + 1
        if t_done % cadence == 0 or t_done == T:
            records.append(_record(x, problem, refs, config, task, t_done,
                                   queries, rng_eval, clock, fallbacks,
                                   surrogate))

    if records[-1].iteration != t_done:
        records.append(_record(x, problem, refs, config, task, t_done,
                               queries, rng_eval, clock, fallbacks, surrogate))
    return RunTrace(records=records, final_x=x, status=status,
                    cut_fallbacks=fallbacks, probe_violations=probe_viol,
                    algorithm=algorithm)


def sbcgi_run(problem, config, x0, refs, *, probe=None, task=None) -> RunTrace:
    """Recursive-momentum cutting-plane conditional gradient (any sampling)."""
    return _run_bilevel_cg(problem, config, x0, refs, estimator="storm",
                           algorithm="sbcgi", probe=probe, task=task)


def sbcgf_run(problem, config, x0, refs, *, probe=None, task=None) -> RunTrace:
    """Path-integrated cutting-plane conditional gradient (finite sums)."""
    return _run_bilevel_cg(problem, config, x0, refs, estimator="spider",
                           algorithm="sbcgf", probe=probe, task=task)


def sbcg_m_run(problem, config, x0, refs, variant="sbcgi", *, probe=None,
               task=None) -> RunTrace:
    """Ablation: zero cut slack, with a lower-level descent fallback.

    When the unregularized cut empties the subproblem, the step direction
    falls back to the plain LMO of the estimated lower gradient, so the run
    continues while the fallback counter records each event.
    """
    if variant not in ("sbcgi", "sbcgf"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    estimator = "storm" if variant == "sbcgi" else "spider"
    return _run_bilevel_cg(problem, config, x0, refs, estimator=estimator,
                           algorithm=f"{variant}-m", kt_zero=True,
                           fallback=True, probe=probe, task=task)


def fw_single_level_run(oracle, feasible_set, config, *, estimator="storm",
                        x_init=None, budget=None, objective_ref=0.0,
                        seed=None) -> RunTrace:
    """Single-level conditional gradient with a variance-reduced estimator.

    Serves the warm start (on the lower objective) and the no-cut ablation.
    ``budget`` caps the number of oracle queries; otherwise config.horizon
    iterations run.  The trace's g_gap column holds the exact objective minus
    ``objective_ref`` (finite sums) and its final point is the output.
    """
    rng, _, rng_eval, _ = _spawn_rngs(config.seed if seed is None else seed)
    x = (np.array(x_init, dtype=float) if x_init is not None
         else feasible_set.interior_point())
    if not feasible_set.contains(x, 1e-9):
        raise ConfigurationError("x_init lies outside the feasible set")
    clock = _Clock(config.measure_time)

    if estimator == "spider":
        if oracle.kind != "finite_sum":
            raise ConfigurationError("spider estimator needs a finite sum")
        n = oracle.n_components
        q = config.spider_q_lower or max(1, int(round(math.sqrt(n))))
        s_batch = config.spider_s_lower or q

    def objective(point):
        if oracle.kind == "finite_sum":
            return oracle.full_value(point)
        if hasattr(oracle, "exact_value"):
            return oracle.exact_value(point)
        return oracle.batch_value(point, rng_eval, config.value_batch())

    def rec(iteration, queries, point):
        return MetricsRecord(iteration=iteration, oracle_queries=queries,
                             g_gap=objective(point) - objective_ref,
                             f_gap=math.nan, wall_ms=clock.ms())

    horizon = config.horizon if budget is None else 2 ** 62
    cadence = _cadence(horizon if budget is None else max(budget, 1),
                       config.log_points)
    records = [rec(0, 0, x)]
    queries = 0
    grad_est = None
    prev = None
    t = 0
    while t < horizon:
        if estimator == "storm":
            step_cost = config.batch if grad_est is None else 2 * config.batch
        else:
            refresh = (t % q == 0)
            step_cost = n if refresh else 2 * s_batch
        if budget is not None and queries + step_cost > budget:
            break
        if estimator == "storm":
            if grad_est is None:
                grad_est = oracle.grad_at(x, oracle.draw(rng, config.batch))
            else:
                mom = (config.momentum.value(t) if config.momentum is not None
                       else float(t + 1) ** -config.omega)
                sample = oracle.draw(rng, config.batch)
                grad_est = ((1.0 - mom) * grad_est
                            + oracle.grad_at(x, sample)
                            - (1.0 - mom) * oracle.grad_at(prev, sample))
        else:
            if refresh:
                grad_est = oracle.full_grad(x)
            else:
                sample = oracle.draw(rng, s_batch)
                grad_est = (grad_est + oracle.grad_at(x, sample)
                            - oracle.grad_at(prev, sample))
        queries += step_cost
        s = feasible_set.lmo(grad_est)
        gamma = config.gamma.value(t + 1)
        prev = x
        x = (1.0 - gamma) * x + gamma * s
        t += 1
        if t % cadence == 0:
            records.append(rec(t, queries, x))
    if records[-1].iteration != t:
        records.append(rec(t, queries, x))
    return RunTrace(records=records, final_x=x, algorithm=f"{estimator}-fw")


def warm_start_x0(problem, config, *, g_star=None, seed_tag=101):
    """Find a low lower-level-value start point and its anchor value.

    Runs single-level conditional gradient on the lower objective for the
    configured query budget.  The anchor value g(x0) is an exact full pass
    for finite sums and a large-mini-batch estimate for streaming oracles.
    When ``g_star`` is known the achieved gap is verified against eps_g/2.
    """
    estimator = "spider" if problem.lower.kind == "finite_sum" else "storm"
    ws_config = replace(config, gamma=config.warm_start_gamma)
    trace = fw_single_level_run(
        problem.lower, problem.set, ws_config, estimator=estimator,
        budget=config.warm_start_budget, seed=(config.seed, seed_tag))
    x0 = trace.final_x
    if problem.lower.kind == "finite_sum":
        g_x0 = problem.lower.full_value(x0)
    else:
        rng = np.random.default_rng((config.seed, seed_tag, 1))
        g_x0 = problem.lower.batch_value(x0, rng, config.value_batch())
    if g_star is not None and g_x0 - g_star > config.eps_g / 2:
        raise WarmStartFailureError(g_x0 - g_star, config.warm_start_budget)
    return x0, float(g_x0)


def _baseline_loop(problem, config, refs, x_init, task, algorithm, stepper):
    """Shared trace machinery for the projected-gradient baselines."""
    rng_u, rng_l, rng_eval, _ = _spawn_rngs(config.seed)
    x = (np.array(x_init, dtype=float) if x_init is not None
         else problem.set.interior_point())
    if not problem.set.contains(x, 1e-9):
        raise ConfigurationError("x_init lies outside the feasible set")
    clock = _Clock(config.measure_time)
    cadence = _cadence(config.horizon, config.log_points)
    queries = 0
    records = [_record(x, problem, refs, config, task, 0, queries, rng_eval,
                       clock, 0)]
    reported = x
    for t in range(config.horizon):
        x, reported, spent = stepper(t, x, rng_u, rng_l)
        queries += spent
        if (t + 1) % cadence == 0 or t + 1 == config.horizon:
            records.append(_record(reported, problem, refs, config, task,
                                   t + 1, queries, rng_eval, clock, 0))
    return RunTrace(records=records, final_x=reported, algorithm=algorithm)


def aripseg_run(problem, config, refs, *, gamma0, rho0, avg_exponent=1.0,
                x_init=None, task=None) -> RunTrace:
    """Averaged iteratively-regularized projected extragradient baseline.

    Each iteration takes two projected steps along gradf + rho_t*gradg with
    fresh samples at the midpoint, and reports the (gamma_t*rho_t)**r
    weighted average of the midpoints.
    """
    state = {"acc": 0.0, "avg": None}

    def stepper(t, x, rng_u, rng_l):
        gamma_t = gamma0 / float(t + 1) ** 0.75
        rho_t = rho0 * float(t + 1) ** 0.25
        _, gf = minibatch_estimate(problem.upper, x, config.batch, rng_u)
        _, gg = minibatch_estimate(problem.lower, x, config.batch, rng_l)
        y = problem.set.project(x - gamma_t * (gf + rho_t * gg))
        _, gf2 = minibatch_estimate(problem.upper, y, config.batch, rng_u)
        _, gg2 = minibatch_estimate(problem.lower, y, config.batch, rng_l)
        x_new = problem.set.project(x - gamma_t * (gf2 + rho_t * gg2))
        w = (gamma_t * rho_t) ** avg_exponent
        acc = state["acc"] + w
        avg = y if state["avg"] is None else (state["acc"] * state["avg"]
                                              + w * y) / acc
        state["acc"], state["avg"] = acc, avg
        return x_new, avg, 4 * config.batch

    return _baseline_loop(problem, config, refs, x_init, task, "aripseg",
                          stepper)


def dbgd_sto_run(problem, config, refs, *, alpha=1.0, beta=1.0,
                 g_floor=0.0, x_init=None, task=None) -> RunTrace:
    """Stochastic dynamic-barrier gradient descent baseline.

    The lower-level multiplier weighs the estimated gradients so descent on
    the upper objective never fights the barrier min(alpha*(g-floor),
    beta*||gradg||^2); iterates are projected back onto the set after each
    step.
    """
    def stepper(t, x, rng_u, rng_l):
        _, gf = minibatch_estimate(problem.upper, x, config.batch, rng_u)
        gval, gg = minibatch_estimate(problem.lower, x, config.batch, rng_l)
        nn = float(gg @ gg)
        if nn < 1e-14:
            lam = 0.0
        else:
            phi = min(alpha * (gval - g_floor), beta * nn)
            lam = max((phi - float(gf @ gg)) / nn, 0.0)
        gamma_t = config.gamma.value(t + 1)
        x_new = problem.set.project(x - gamma_t * (gf + lam * gg))
        return x_new, x_new, 2 * config.batch

    return _baseline_loop(problem, config, refs, x_init, task, "dbgd",
                          stepper)


def iterations_for_budget(algorithm: str, budget: int, *, batch: int = 1,
                          n_upper: int = 0, n_lower: int = 0,
                          q_upper: Optional[int] = None,
                          q_lower: Optional[int] = None) -> int:
    """Largest horizon whose cumulative query count fits the budget."""
    if budget <= 0:
        return 0
    if algorithm in ("sbcgi", "sbcgi-m", "storm-fw"):
        per_level = 1 if algorithm == "storm-fw" else 2
        init = per_level * batch
        step = 2 * per_level * batch
        if budget < init:
            return 0
        return 1 + (budget - init) // step
    if algorithm in ("sbcgf", "sbcgf-m", "spider-fw"):
        q_u = q_upper or max(1, int(round(math.sqrt(max(n_upper, 1)))))
        q_l = q_lower or max(1, int(round(math.sqrt(max(n_lower, 1)))))
        lower_only = algorithm == "spider-fw"
        spent = 0
        t = 0
        while True:
            cost = 0
            if not lower_only:
                cost += n_upper if t % q_u == 0 else 2 * q_u
            cost += n_lower if t % q_l == 0 else 2 * q_l
            if spent + cost > budget:
                return t
            spent += cost
            t += 1
    if algorithm == "aripseg":
        return budget // (4 * batch)
    if algorithm == "dbgd":
        return budget // (2 * batch)
    raise ConfigurationError(f"unknown algorithm {algorithm!r}")
