"""Shared problem abstractions: stochastic oracles, the noise-tolerant
cutting plane with its slack schedules, and per-iteration run metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "UnsupportedMetricError",
    "ConfigurationError",
    "ProblemConstants",
    "StochasticOracle",
    "LeastSquaresOracle",
    "ComponentOracle",
    "NoisyOracle",
    "BilevelProblem",
    "CutPlane",
    "make_cut_plane",
    "cut_contains",
    "kt_sbcgi",
    "kt_sbcgf",
    "KtSchedule",
    "fw_gap_exact",
    "ReferenceValues",
    "MetricsRecord",
    "evaluate_metrics",
]


class UnsupportedMetricError(RuntimeError):
    """Requested a metric this problem cannot provide (e.g. exact FW gap)."""


class ConfigurationError(ValueError):
    """Inconsistent or incomplete run configuration."""


def _check_finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return arr


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness and noise constants that enter the cut-slack schedules.

    L_f, L_g are gradient Lipschitz constants of the upper/lower objectives,
    L_l is a Lipschitz constant of the lower function values on the feasible
    set, sigma_f/sigma_g/sigma_l are sub-Gaussian scales of the gradient and
    function-value noise, and D is the Euclidean diameter of the feasible set.
    """

    L_f: float
    L_g: float
    L_l: float
    sigma_f: float = 0.0
    sigma_g: float = 0.0
    sigma_l: float = 0.0
    D: float = 1.0

    def __post_init__(self):
        for name in ("L_f", "L_g", "L_l", "D"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v}")
        for name in ("sigma_f", "sigma_g", "sigma_l"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be nonnegative, got {v}")


class StochasticOracle:
    """Sampled access to an objective given as an expectation or finite sum.

    A *sample* is an opaque batch returned by ``draw``; ``value_at`` and
    ``grad_at`` evaluate the batch-mean stochastic value/gradient at a point
    under that sample, so callers can difference two points on identical
    randomness (the correlated-sample rule variance-reduced estimators need).
    Finite-sum oracles additionally expose exact full passes.
    """

    kind = "streaming"
    dimension: int = 0
    n_components: Optional[int] = None

    def draw(self, rng: np.random.Generator, batch: int = 1):
        raise NotImplementedError

    def value_at(self, x: np.ndarray, sample) -> float:
        raise NotImplementedError

    def grad_at(self, x: np.ndarray, sample) -> np.ndarray:
        raise NotImplementedError

    # convenience wrappers
    def sample_value(self, x, rng):
        return self.value_at(x, self.draw(rng, 1))

    def sample_grad(self, x, rng):
        return self.grad_at(x, self.draw(rng, 1))

    def batch_value(self, x, rng, batch):
        return self.value_at(x, self.draw(rng, batch))

    def batch_grad(self, x, rng, batch):
        return self.grad_at(x, self.draw(rng, batch))

    def full_value(self, x) -> float:
        raise UnsupportedMetricError(f"{type(self).__name__} has no exact full pass")

    def full_grad(self, x) -> np.ndarray:
        raise UnsupportedMetricError(f"{type(self).__name__} has no exact full pass")


class LeastSquaresOracle(StochasticOracle):
    """Finite-sum least squares: component i is 0.5*(a_i @ x - b_i)**2."""

    kind = "finite_sum"

    def __init__(self, A: np.ndarray, b: np.ndarray):
        A = np.ascontiguousarray(A, dtype=float)
        b = np.ascontiguousarray(b, dtype=float)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise ValueError(f"incompatible shapes {A.shape} / {b.shape}")
        self.A = A
        self.b = b
        self.dimension = A.shape[1]
        self.n_components = A.shape[0]

    def draw(self, rng, batch=1):
        return rng.integers(0, self.n_components, size=batch)

    def value_at(self, x, sample):
        if sample.size == 1:
            r = float(self.A[sample[0]] @ x - self.b[sample[0]])
            return 0.5 * r * r
        r = self.A[sample] @ x - self.b[sample]
        return 0.5 * float(np.mean(r * r))

    def grad_at(self, x, sample):
        if sample.size == 1:
            row = self.A[sample[0]]
            return row * float(row @ x - self.b[sample[0]])
        rows = self.A[sample]
        r = rows @ x - self.b[sample]
        return rows.T @ r / sample.size

    def value_and_grad_at(self, x, sample):
        """Batch-mean value and gradient from one shared row fetch."""
        if sample.size == 1:
            row = self.A[sample[0]]
            r = float(row @ x - self.b[sample[0]])
            return 0.5 * r * r, row * r
        rows = self.A[sample]
        r = rows @ x - self.b[sample]
        return 0.5 * float(r @ r) / sample.size, rows.T @ r / sample.size

    def full_value(self, x):
        r = self.A @ x - self.b
        return 0.5 * float(np.mean(r * r))

    def full_grad(self, x):
        r = self.A @ x - self.b
        return self.A.T @ r / self.n_components


class ComponentOracle(StochasticOracle):
    """Generic finite-sum oracle driven by per-component callables.

    Loops over components; intended for toy problems and tests, not for the
    large benchmark instances.
    """

    kind = "finite_sum"

    def __init__(self, n, dimension, value_fn, grad_fn):
        if n < 1:
            raise ValueError("need at least one component")
        self.n_components = int(n)
        self.dimension = int(dimension)
        self._value = value_fn
        self._grad = grad_fn

    def draw(self, rng, batch=1):
        return rng.integers(0, self.n_components, size=batch)

    def value_at(self, x, sample):
        return float(np.mean([self._value(x, int(i)) for i in sample]))

    def grad_at(self, x, sample):
        g = np.zeros(self.dimension)
        for i in sample:
            g += np.asarray(self._grad(x, int(i)), dtype=float)
        return g / len(sample)

    def full_value(self, x):
        return float(np.mean([self._value(x, i) for i in range(self.n_components)]))

    def full_grad(self, x):
        grads = np.stack([np.asarray(self._grad(x, i), dtype=float)
                          for i in range(self.n_components)])
        return grads.mean(axis=0)


class NoisyOracle(StochasticOracle):
    """Streaming oracle: exact mean functions plus additive Gaussian noise.

    One sample carries a value perturbation and a gradient perturbation so
    that value and gradient queries at a point share randomness.  Gradient
    noise has root-mean-square norm sigma_grad (per-coordinate std scaled by
    1/sqrt(d)); value noise has std sigma_val.  The exact mean functions stay
    reachable through ``exact_value``/``exact_grad`` for evaluation only.
    """

    kind = "streaming"

    def __init__(self, value_fn, grad_fn, dimension, sigma_val=0.0, sigma_grad=0.0):
        self._value = value_fn
        self._grad = grad_fn
        self.dimension = int(dimension)
        self.sigma_val = float(sigma_val)
        self.sigma_grad = float(sigma_grad)

    def draw(self, rng, batch=1):
        eps_val = rng.standard_normal(batch)
        eps_grad = rng.standard_normal((batch, self.dimension))
        return eps_val, eps_grad

    def value_at(self, x, sample):
        eps_val, _ = sample
        return float(self._value(x) + self.sigma_val * np.mean(eps_val))

    def grad_at(self, x, sample):
        _, eps_grad = sample
        noise = eps_grad.mean(axis=0) * (self.sigma_grad / math.sqrt(self.dimension))
        return self._grad(x) + noise

    def exact_value(self, x):
        return float(self._value(x))

    def exact_grad(self, x):
        return np.asarray(self._grad(x), dtype=float)


@dataclass
class BilevelProblem:
    """Upper/lower stochastic oracles over one feasible set.

    ``solution_set_lmo``, when available, minimizes a linear objective over
    the exact lower-level solution set and unlocks the exact FW gap.
    """

    upper: StochasticOracle
    lower: StochasticOracle
    set: object  # FeasibleSet; typed loosely to avoid an import cycle
    constants: ProblemConstants
    solution_set_lmo: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        dims = {self.upper.dimension, self.lower.dimension, self.set.dimension}
        if len(dims) != 1:
            raise ValueError(f"oracle/set dimensions disagree: {dims}")

    @property
    def dimension(self):
        return self.set.dimension


@dataclass(frozen=True)
class CutPlane:
    """Halfspace {s: <normal, s - anchor> <= offset} anchored at an iterate."""

    normal: np.ndarray
    anchor: np.ndarray
    offset: float

    def gap(self, s: np.ndarray) -> float:
        """Slack of s: offset minus the left-hand side (>= 0 means inside)."""
        return self.offset - float(self.normal @ (s - self.anchor))


def make_cut_plane(grad_g_est, g_est, g_x0, k_t, anchor) -> CutPlane:
    """Build the noise-tolerant halfspace around the lower-level sublevel set.

    The plane has normal equal to the lower-gradient estimate, passes through
    ``anchor`` and keeps every point whose estimated lower decrease does not
    exceed ``g_x0 - g_est + k_t``; the slack ``k_t`` absorbs estimator noise.
    """
    grad = _check_finite("grad_g_est", grad_g_est)
    anchor = _check_finite("anchor", anchor)
    if grad.shape != anchor.shape:
        raise ValueError(f"shape mismatch {grad.shape} vs {anchor.shape}")
    for name, v in (("g_est", g_est), ("g_x0", g_x0), ("k_t", k_t)):
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
    if k_t < 0:
        raise ValueError(f"k_t must be nonnegative, got {k_t}")
    return CutPlane(grad, anchor, float(g_x0) - float(g_est) + float(k_t))


def cut_contains(plane: CutPlane, s, tol: float = 0.0) -> bool:
    """True iff s satisfies the halfspace inequality within tol."""
    s = np.asarray(s, dtype=float)
    if s.shape != plane.anchor.shape:
        raise ValueError(f"dimension mismatch {s.shape} vs {plane.anchor.shape}")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return plane.gap(s) >= -tol


_RATIO = {1.0: 3.0 / 2.0, 2.0 / 3.0: 3.0 ** (2.0 / 3.0) / (3.0 ** (2.0 / 3.0) - 1.0)}


def kt_sbcgi(constants: ProblemConstants, t: int, delta: float, d: int,
             omega: float = 1.0, horizon: int = 0, abs_const: float = 1.0) -> float:
    """Cut slack for the recursive-momentum solver at iteration t.

    omega=1 gives the convex-mode schedule, where the confidence logs grow
    with t; omega=2/3 gives the nonconvex-mode schedule, where they are
    pinned to the horizon.  Logs are natural.  ``abs_const`` supplies the
    concentration inequality's absolute constant.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if abs_const < 0:
        raise ValueError("abs_const must be nonnegative")
    if omega == 1.0:
        t_log = max(t, 1)  # the t=0 slack reuses the t=1 confidence terms
        log_l = math.log(6.0 * t_log / delta)
        log_g = math.log(6.0 * t_log * d / delta)
        decay = (t + 1.0) ** -0.5
    elif omega == 2.0 / 3.0:
        if horizon < 1:
            raise ValueError("nonconvex schedule needs horizon >= 1")
        log_l = math.log(6.0 * horizon / delta)
        log_g = math.log(6.0 * horizon * d / delta)
        decay = (t + 1.0) ** (-1.0 / 3.0)
    else:
        raise ValueError(f"unsupported omega {omega}; expected 1 or 2/3")
    ratio = _RATIO[omega]
    c = constants
    val_term = (2.0 * c.L_l * c.D + ratio * c.sigma_l) * math.sqrt(2.0 * log_l)
    grad_term = c.D * (2.0 * c.L_g * c.D + ratio * c.sigma_g) * math.sqrt(2.0 * log_g)
    return abs_const * (val_term + grad_term) * decay


def kt_sbcgf(constants: ProblemConstants, gamma: float, delta: float,
             horizon: int) -> float:
    """Constant cut slack for the path-integrated (finite-sum) solver."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    c = constants
    root = math.sqrt(math.log(12.0 * horizon / delta))
    return 4.0 * c.D * (c.L_l + c.L_g * c.D) * root * gamma


@dataclass(frozen=True)
class KtSchedule:
    """How the cut slack K_t is produced: theorem formula, manual, or zero.

    Manual mode evaluates kappa / (t+1)**power, matching the hand-tuned
    schedules used in the benchmark experiments.
    """

    mode: str = "theorem"
    kappa: float = 0.0
    power: float = 0.5
    abs_const: float = 1.0

    def __post_init__(self):
        if self.mode not in ("theorem", "manual", "zero"):
            raise ValueError(f"unknown K_t mode {self.mode!r}")

    def for_sbcgi(self, constants, t, delta, d, omega, horizon):
        if self.mode == "zero":
            return 0.0
        if self.mode == "manual":
            return self.kappa * (t + 1.0) ** (-self.power)
        return kt_sbcgi(constants, t, delta, d, omega, horizon, self.abs_const)

    def for_sbcgf(self, constants, t, gamma, delta, horizon):
        if self.mode == "zero":
            return 0.0
        if self.mode == "manual":
            return self.kappa * (t + 1.0) ** (-self.power)
        return self.abs_const * kt_sbcgf(constants, gamma, delta, horizon)


def fw_gap_exact(x, grad_f, solset_lmo) -> float:
    """Exact stationarity gap max_{s in solution set} <grad_f, x - s>.

    ``solset_lmo`` must minimize a linear objective over the lower-level
    solution set exactly; problems without one raise UnsupportedMetricError.
    """
    if solset_lmo is None:
        raise UnsupportedMetricError("problem exposes no solution-set LMO")
    x = np.asarray(x, dtype=float)
    grad_f = np.asarray(grad_f, dtype=float)
    s = np.asarray(solset_lmo(grad_f), dtype=float)
    return float(grad_f @ (x - s))


@dataclass
class ReferenceValues:
    """Reference optima used to report gaps.

    g_star / f_star are the lower-level and bilevel optima; tolerance records
    how accurate they are; g_x0 is the lower value at the warm-start anchor.
    """

    g_star: float
    f_star: float
    tolerance: float
    g_x0: float = math.nan
    f_star_tolerance: Optional[float] = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if np.isfinite(self.g_x0) and self.g_x0 < self.g_star - self.tolerance:
            raise ValueError(
                f"g_x0={self.g_x0} below g_star={self.g_star} beyond tolerance")


@dataclass
class MetricsRecord:
    """One logged point of a solver run."""

    iteration: int
    oracle_queries: int
    g_gap: float
    f_gap: float
    fw_gap: float = math.nan
    task_metric: float = math.nan
    wall_ms: float = 0.0
    cut_fallback_count: int = 0


def evaluate_metrics(x, problem: BilevelProblem, refs: ReferenceValues,
                     task: Optional[Callable[[np.ndarray], float]] = None,
                     *, iteration: int = 0, oracle_queries: int = 0,
                     compute_fw_gap: bool = False, value_batch: Optional[int] = None,
                     eval_rng: Optional[np.random.Generator] = None,
                     feas_tol: float = 1e-9) -> MetricsRecord:
    """Evaluate the gap metrics of an iterate against reference values.

    Finite-sum objectives are evaluated with exact full passes; streaming
    oracles fall back to their exact mean functions when available, else to a
    mini-batch estimate of ``value_batch`` samples (required in that case).
    """
    x = np.asarray(x, dtype=float)
    if not problem.set.contains(x, feas_tol):
        raise ValueError("iterate lies outside the feasible set")

    def _objective(oracle):
        if oracle.kind == "finite_sum":
            return oracle.full_value(x)
        if hasattr(oracle, "exact_value"):
            return oracle.exact_value(x)
        if value_batch is None or eval_rng is None:
            raise ConfigurationError(
                "streaming oracle needs value_batch and eval_rng to evaluate")
        return oracle.batch_value(x, eval_rng, value_batch)

    g_gap = _objective(problem.lower) - refs.g_star
    f_gap = _objective(problem.upper) - refs.f_star
    fw = math.nan
    if compute_fw_gap:
        if problem.upper.kind == "finite_sum":
            grad = problem.upper.full_grad(x)
        elif hasattr(problem.upper, "exact_grad"):
            grad = problem.upper.exact_grad(x)
        else:
            raise UnsupportedMetricError("no exact upper gradient available")
        fw = fw_gap_exact(x, grad, problem.solution_set_lmo)
    task_value = math.nan if task is None else float(task(x))
    return MetricsRecord(iteration=iteration, oracle_queries=oracle_queries,
                         g_gap=float(g_gap), f_gap=float(f_gap), fw_gap=fw,
                         task_metric=task_value)
