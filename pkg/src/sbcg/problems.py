"""Benchmark problem instances: over-parameterized regression (CSV or
synthetic) and continual dictionary learning, plus the deterministic
reference solver that produces the optima used for gap reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .core import (
    BilevelProblem,
    LeastSquaresOracle,
    ProblemConstants,
    ReferenceValues,
    StochasticOracle,
)
from .sets import BallProductBlock, BlockProduct, L1Ball, UniformL1Product
from .simplex import LpInfeasibleError, solve_lp

__all__ = [
    "IngestionError",
    "ReferenceFailureError",
    "RegressionProblem",
    "DatasetSplit",
    "load_regression_csv",
    "gen_synthetic_regression",
    "regression_oracles",
    "regression_constants",
    "make_regression_bilevel",
    "DictionaryProblem",
    "gen_dictionary_data",
    "dictionary_two_phase_init",
    "dictionary_oracles",
    "DictionaryInstance",
    "make_dictionary_bilevel",
    "recovery_rate",
    "reference_values",
]

RECOVERY_THRESHOLD = 0.9  # fixed: an atom counts as recovered above this


class IngestionError(ValueError):
    """Malformed input data, with the offending location in the message."""


class ReferenceFailureError(RuntimeError):
    def __init__(self, which, achieved, target):
        super().__init__(f"{which} reference stalled at duality gap "
                         f"{achieved:.3e} (target {target:.1e})")
        self.achieved = achieved


# ---------------------------------------------------------------------------
# over-parameterized regression
# ---------------------------------------------------------------------------

@dataclass
class RegressionProblem:
    """Dense train/validation/test splits with an l1 constraint radius."""

    A_tr: np.ndarray
    b_tr: np.ndarray
    A_val: np.ndarray
    b_val: np.ndarray
    A_test: np.ndarray
    b_test: np.ndarray
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        d = self.A_tr.shape[1]
        for name in ("A_val", "A_test"):
            if getattr(self, name).shape[1] != d:
                raise ValueError(f"{name} feature count differs from A_tr")

    @property
    def dimension(self):
        return self.A_tr.shape[1]


@dataclass(frozen=True)
class DatasetSplit:
    """Seeded three-way row partition (exact and disjoint)."""

    seed: int
    sizes: Tuple[int, int, int]
    permutation: np.ndarray


def split_rows(n_rows: int, seed: int) -> DatasetSplit:
    if n_rows < 3:
        raise IngestionError(f"need at least 3 rows to split, got {n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    third = n_rows // 3
    sizes = (third, third, n_rows - 2 * third)
    return DatasetSplit(seed=seed, sizes=sizes, permutation=perm)


def load_regression_csv(path, target_column: int, seed: int,
                        lam: float = 10.0) -> RegressionProblem:
    """Load a dense numeric CSV, split rows into thirds, peel off one column.

    The first row is treated as a header when any of its cells fails to
    parse as a number.  Parsing errors report the 1-based row and column.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise IngestionError(f"{path}: empty file")
    start = 0
    first = lines[0].split(",")
    try:
        [float(cell) for cell in first]
    except ValueError:
        start = 1  # header row
    width = None
    for i, line in enumerate(lines[start:], start=start + 1):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise IngestionError(f"{path}: row {i} has {len(cells)} cells, "
                                 f"expected {width}")
        parsed = []
        for j, cell in enumerate(cells, start=1):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise IngestionError(
                    f"{path}: row {i}, column {j}: non-numeric cell {cell!r}")
        rows.append(parsed)
    data = np.asarray(rows, dtype=float)
    if data.shape[1] < 2:
        raise IngestionError(f"{path}: need at least 2 columns")
    if not -data.shape[1] <= target_column < data.shape[1]:
        raise IngestionError(f"{path}: target column {target_column} out of "
                             f"range for width {data.shape[1]}")
    b = data[:, target_column]
    A = np.delete(data, target_column % data.shape[1], axis=1)
    split = split_rows(A.shape[0], seed)
    i, j = split.sizes[0], split.sizes[0] + split.sizes[1]
    p = split.permutation
    return RegressionProblem(A[p[:i]], b[p[:i]], A[p[i:j]], b[p[i:j]],
                             A[p[j:]], b[p[j:]], lam)


def gen_synthetic_regression(rows_per_split: int, dim: int, noise_std: float,
                             seed: int, lam: float = 10.0,
                             sparsity: int = 5) -> RegressionProblem:
    """Gaussian design with a planted sparse coefficient vector.

    Keeps rows_per_split < dim so that every split admits interpolating
    solutions inside a moderate l1 ball.
    """
    if rows_per_split >= dim:
        raise ValueError("over-parameterization needs rows_per_split < dim")
    rng = np.random.default_rng(seed)
    n = 3 * rows_per_split
    A = rng.standard_normal((n, dim))
    beta = np.zeros(dim)
    support = rng.choice(dim, size=sparsity, replace=False)
    signs = rng.choice([-1.0, 1.0], size=sparsity)
    beta[support] = signs * rng.uniform(0.5, 1.0, size=sparsity)
    b = A @ beta + noise_std * rng.standard_normal(n)
    r = rows_per_split
    return RegressionProblem(A[:r], b[:r], A[r:2 * r], b[r:2 * r],
                             A[2 * r:], b[2 * r:], lam)


def regression_oracles(problem: RegressionProblem):
    """Finite-sum least-squares oracles, the l1 ball, and the solution-set
    LMO (an LP over interpolating points; None when none exist in the ball)."""
    upper = LeastSquaresOracle(problem.A_val, problem.b_val)
    lower = LeastSquaresOracle(problem.A_tr, problem.b_tr)
    ball = L1Ball(problem.lam, problem.dimension)
    d = problem.dimension
    A, b = problem.A_tr, problem.b_tr
    ones_row = np.ones(2 * d)
    a_eq = np.hstack([A, -A])

    def solset_lmo(c):
        c = np.asarray(c, dtype=float)
        x = solve_lp(np.concatenate([c, -c]), a_ub=ones_row, b_ub=problem.lam,
                     a_eq=a_eq, b_eq=b)
        return x[:d] - x[d:]

    try:
        solset_lmo(np.ones(d) / d)
    except LpInfeasibleError:
        solset_lmo = None  # non-interpolating: no analytic solution set
    return upper, lower, ball, solset_lmo


def regression_constants(problem: RegressionProblem) -> ProblemConstants:
    """Data-driven estimates of the schedule constants (documented, crude).

    Least-squares components have Hessian a_i a_i^T, so the gradient
    Lipschitz constants are max row norms squared; the value Lipschitz
    constant bounds |a_i^T x - b_i| * ||a_i|| over the ball.
    """
    row_tr = np.linalg.norm(problem.A_tr, axis=1)
    row_val = np.linalg.norm(problem.A_val, axis=1)
    L_g = float(np.max(row_tr ** 2))
    L_f = float(np.max(row_val ** 2))
    res_bound = row_tr * problem.lam + np.abs(problem.b_tr)
    L_l = float(np.max(row_tr * res_bound))

    def noise_scales(oracle, points):
        sg, sl = 0.0, 0.0
        for x in points:
            grads = oracle.A * (oracle.A @ x - oracle.b)[:, None]
            mean_grad = grads.mean(axis=0)
            sg = max(sg, math.sqrt(float(np.mean(
                np.sum((grads - mean_grad) ** 2, axis=1)))))
            vals = 0.5 * (oracle.A @ x - oracle.b) ** 2
            sl = max(sl, float(np.std(vals)))
        return sg, sl

    lower = LeastSquaresOracle(problem.A_tr, problem.b_tr)
    upper = LeastSquaresOracle(problem.A_val, problem.b_val)
    probes = [np.zeros(problem.dimension),
              L1Ball(problem.lam, problem.dimension).lmo(
                  -np.ones(problem.dimension))]
    sigma_g, sigma_l = noise_scales(lower, probes)
    sigma_f, _ = noise_scales(upper, probes)
    return ProblemConstants(L_f=L_f, L_g=L_g, L_l=L_l, sigma_f=sigma_f,
                            sigma_g=sigma_g, sigma_l=sigma_l,
                            D=2.0 * problem.lam)


def make_regression_bilevel(problem: RegressionProblem):
    """Assemble the bilevel problem plus the test-error task metric."""
    upper, lower, ball, solset_lmo = regression_oracles(problem)
    bilevel = BilevelProblem(upper=upper, lower=lower, set=ball,
                             constants=regression_constants(problem),
                             solution_set_lmo=solset_lmo)
    test_oracle = LeastSquaresOracle(problem.A_test, problem.b_test)
    return bilevel, test_oracle.full_value


# ---------------------------------------------------------------------------
# continual dictionary learning
# ---------------------------------------------------------------------------

@dataclass
class DictionaryProblem:
    """Synthetic two-stage dictionary data with its generating ground truth.

    A holds the old dataset (columns), A_new the newly arriving one; the
    learned dictionary grows from p to q atoms while old codes stay fixed.
    """

    A: np.ndarray
    A_new: np.ndarray
    delta: float
    m: int
    p: int
    p_new: int
    q: int
    D_true: np.ndarray
    shared_atoms: int

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def n_new(self):
        return self.A_new.shape[1]


def _sparse_codes(rng, n_atoms, n_cols, sparsity):
    X = np.zeros((n_atoms, n_cols))
    for k in range(n_cols):
        idx = rng.choice(n_atoms, size=sparsity, replace=False)
        mags = rng.uniform(0.2, 1.0, size=sparsity)
        signs = rng.choice([-1.0, 1.0], size=sparsity)
        X[idx, k] = signs * mags
    return X


def gen_dictionary_data(seed: int, *, m: int = 15, q: int = 30, p: int = 24,
                        p_new: int = 16, n: int = 100, n_new: int = 100,
                        sparsity: int = 5, noise_std: float = 0.01,
                        delta: float = 3.0, min_shared: int = 10
                        ) -> DictionaryProblem:
    """Generate the ground-truth dictionary and both sample sets.

    The full-size configuration is m=25, q=50, p=40, p_new=20, n=n_new=250;
    the defaults are a desk-scale replica.  The two sub-dictionaries are
    drawn to share at least ``min_shared`` atoms.
    """
    if p > q or p_new > q:
        raise ValueError("sub-dictionaries cannot exceed the full atom count")
    shared = max(min_shared, p + p_new - q)
    if shared > min(p, p_new):
        raise ValueError("cannot share more atoms than a sub-dictionary has")
    rng = np.random.default_rng(seed)
    D_true = rng.standard_normal((m, q))
    D_true /= np.linalg.norm(D_true, axis=0, keepdims=True)

    atoms = rng.permutation(q)
    shared_idx = atoms[:shared]
    rest = atoms[shared:]
    old_only = rest[:p - shared]
    new_only = rest[p - shared:p - shared + (p_new - shared)]
    old_idx = np.sort(np.concatenate([shared_idx, old_only]))
    new_idx = np.sort(np.concatenate([shared_idx, new_only]))

    X_old = _sparse_codes(rng, p, n, sparsity)
    X_new = _sparse_codes(rng, p_new, n_new, sparsity)
    A = D_true[:, old_idx] @ X_old + noise_std * rng.standard_normal((m, n))
    A_new = (D_true[:, new_idx] @ X_new
             + noise_std * rng.standard_normal((m, n_new)))
    return DictionaryProblem(A=A, A_new=A_new, delta=delta, m=m, p=p,
                             p_new=p_new, q=q, D_true=D_true,
                             shared_atoms=int(len(np.intersect1d(old_idx,
                                                                 new_idx))))


def _exact_step(err, delta_dir_codes):
    """Argmin over [0,1] of the quadratic ||err - g*delta_dir_codes||^2."""
    a = float(np.sum(delta_dir_codes ** 2))
    if a <= 0:
        return 0.0
    g = float(np.sum(err * delta_dir_codes)) / a
    return min(max(g, 0.0), 1.0)


def dictionary_two_phase_init(problem: DictionaryProblem, seed: int,
                              phase1_iters: int = 10_000,
                              phase2_iters: int = 10_000):
    """Fit an initial dictionary to the old dataset.

    Phase 1 runs joint conditional gradient on the dictionary and the codes;
    phase 2 freezes the codes and polishes the dictionary with exact line
    search (closed-form step for the quadratic, clipped to [0,1]).
    """
    rng = np.random.default_rng(seed)
    m, p, n = problem.m, problem.p, problem.n
    A = problem.A
    D = rng.standard_normal((m, p))
    D /= np.linalg.norm(D, axis=0, keepdims=True)
    X = rng.standard_normal((p, n))
    X *= problem.delta / np.sum(np.abs(X), axis=0, keepdims=True)

    for t in range(phase1_iters):
        R = D @ X - A
        G_D = R @ X.T / n
        G_X = D.T @ R / n
        S_D = np.zeros_like(D)
        norms = np.linalg.norm(G_D, axis=0)
        nz = norms > 0
        S_D[:, nz] = -G_D[:, nz] / norms[nz]
        S_X = np.zeros_like(X)
        rows = np.argmax(np.abs(G_X), axis=0)
        cols = np.arange(n)
        S_X[rows, cols] = -problem.delta * np.sign(G_X[rows, cols])
        gamma = 1.0 / math.sqrt(t + 1.0)
        D = (1.0 - gamma) * D + gamma * S_D
        X = (1.0 - gamma) * X + gamma * S_X

    for _ in range(phase2_iters):
        R = A - D @ X
        G_D = -R @ X.T / n
        S_D = np.zeros_like(D)
        norms = np.linalg.norm(G_D, axis=0)
        nz = norms > 0
        S_D[:, nz] = -G_D[:, nz] / norms[nz]
        delta_dir = S_D - D
        gamma = _exact_step(R, delta_dir @ X)
        if gamma == 0.0:
            break
        D = D + gamma * delta_dir
    return D, X


class DictionaryUpperOracle(StochasticOracle):
    """Reconstruction error of the new dataset under learned codes.

    The flat variable packs the dictionary columns (m*q entries,
    column-major) followed by the code columns (q entries each).  Component
    k touches the dictionary and code column k only.
    """

    kind = "finite_sum"

    def __init__(self, A_new, m, q):
        self.A_new = np.ascontiguousarray(A_new, dtype=float)
        self.m = m
        self.q = q
        self.n_components = A_new.shape[1]
        self.dimension = m * q + q * self.n_components

    def draw(self, rng, batch=1):
        return rng.integers(0, self.n_components, size=batch)

    def unpack(self, z):
        m, q = self.m, self.q
        D = z[:m * q].reshape(q, m).T  # column-major dictionary
        X = z[m * q:].reshape(self.n_components, q).T
        return D, X

    def pack(self, D, X):
        return np.concatenate([D.T.ravel(), X.T.ravel()])

    def value_at(self, z, sample):
        D, X = self.unpack(z)
        R = self.A_new[:, sample] - D @ X[:, sample]
        return 0.5 * float(np.mean(np.sum(R * R, axis=0)))

    def grad_at(self, z, sample):
        D, X = self.unpack(z)
        cols = X[:, sample]
        R = self.A_new[:, sample] - D @ cols
        batch = len(sample)
        G_D = -R @ cols.T / batch
        G_X = np.zeros_like(X)
        np.add.at(G_X.T, sample, (-D.T @ R).T / batch)
        return self.pack(G_D, G_X)

    def full_value(self, z):
        D, X = self.unpack(z)
        R = self.A_new - D @ X
        return 0.5 * float(np.mean(np.sum(R * R, axis=0)))

    def full_grad(self, z):
        D, X = self.unpack(z)
        n = self.n_components
        R = self.A_new - D @ X
        return self.pack(-R @ X.T / n, -D.T @ R / n)


class DictionaryLowerOracle(StochasticOracle):
    """Reconstruction error of the old dataset under its frozen codes.

    Depends on the dictionary block only; the code block of the gradient is
    identically zero.
    """

    kind = "finite_sum"

    def __init__(self, A, X_fixed, m, q, n_new):
        self.A = np.ascontiguousarray(A, dtype=float)
        self.X_fixed = np.ascontiguousarray(X_fixed, dtype=float)  # q x n
        self.m = m
        self.q = q
        self.n_components = A.shape[1]
        self.dimension = m * q + q * n_new

    def draw(self, rng, batch=1):
        return rng.integers(0, self.n_components, size=batch)

    def _dict(self, z):
        return z[:self.m * self.q].reshape(self.q, self.m).T

    def value_at(self, z, sample):
        D = self._dict(z)
        R = self.A[:, sample] - D @ self.X_fixed[:, sample]
        return 0.5 * float(np.mean(np.sum(R * R, axis=0)))

    def grad_at(self, z, sample):
        D = self._dict(z)
        cols = self.X_fixed[:, sample]
        R = self.A[:, sample] - D @ cols
        out = np.zeros(self.dimension)
        out[:self.m * self.q] = (-R @ cols.T / len(sample)).T.ravel()
        return out

    def full_value(self, z):
        D = self._dict(z)
        R = self.A - D @ self.X_fixed
        return 0.5 * float(np.mean(np.sum(R * R, axis=0)))

    def full_grad(self, z):
        D = self._dict(z)
        R = self.A - D @ self.X_fixed
        out = np.zeros(self.dimension)
        out[:self.m * self.q] = (-R @ self.X_fixed.T / self.n_components).T.ravel()
        return out


@dataclass
class DictionaryInstance:
    """Everything a solver needs for one seeded dictionary run."""

    bilevel: BilevelProblem
    x0: np.ndarray
    upper: DictionaryUpperOracle
    problem: DictionaryProblem

    def task_metric(self, z):
        D, _ = self.upper.unpack(z)
        return recovery_rate(D, self.problem.D_true)


def dictionary_constants(problem: DictionaryProblem, X_fixed,
                         diameter) -> ProblemConstants:
    """Crude documented bounds adequate for schedule construction."""
    norms = np.linalg.norm(X_fixed, axis=0)
    L_g = float(np.max(norms) ** 2)
    amax = float(np.max(np.linalg.norm(problem.A_new, axis=0)))
    # upper Hessian blocks are bounded by code and residual norms on the set
    L_f = float(problem.delta ** 2 + 2.0 * problem.delta
                + amax + math.sqrt(problem.q))
    res = np.linalg.norm(problem.A, axis=0) + norms * 1.0
    L_l = float(np.max(norms * res))
    return ProblemConstants(L_f=max(L_f, 1e-9), L_g=max(L_g, 1e-9),
                            L_l=max(L_l, 1e-9), sigma_f=1.0, sigma_g=1.0,
                            sigma_l=1.0, D=diameter)


def dictionary_oracles(problem: DictionaryProblem, D_init, X_init, seed: int):
    """Build oracles, the block feasible set, and the enlarged start point.

    The start dictionary is the fitted one padded with zero atoms; the new
    codes start at random columns rescaled to l1 norm delta.
    """
    m, q, p = problem.m, problem.q, problem.p
    n, n_new = problem.n, problem.n_new
    X_fixed = np.vstack([X_init, np.zeros((q - p, n))])
    upper = DictionaryUpperOracle(problem.A_new, m, q)
    lower = DictionaryLowerOracle(problem.A, X_fixed, m, q, n_new)
    feasible = BlockProduct((BallProductBlock(num_blocks=q, block_dim=m),
                             UniformL1Product(problem.delta, n_new, q)))

    rng = np.random.default_rng((seed, 0xD1C7))
    D0 = np.hstack([D_init, np.zeros((m, q - p))])
    X0 = rng.standard_normal((q, n_new))
    X0 *= problem.delta / np.sum(np.abs(X0), axis=0, keepdims=True)
    x0 = upper.pack(D0, X0)
    constants = dictionary_constants(problem, X_fixed, feasible.diameter)
    bilevel = BilevelProblem(upper=upper, lower=lower, set=feasible,
                             constants=constants)
    return bilevel, x0, upper


def make_dictionary_bilevel(problem: DictionaryProblem, seed: int,
                            phase1_iters: int = 10_000,
                            phase2_iters: int = 10_000) -> DictionaryInstance:
    D_init, X_init = dictionary_two_phase_init(problem, seed, phase1_iters,
                                               phase2_iters)
    bilevel, x0, upper = dictionary_oracles(problem, D_init, X_init, seed)
    return DictionaryInstance(bilevel=bilevel, x0=x0, upper=upper,
                              problem=problem)


def recovery_rate(D_cols: np.ndarray, D_true: np.ndarray) -> float:
    """Fraction of reference atoms matched by some learned column with
    absolute inner product strictly above the 0.9 threshold."""
    overlaps = np.abs(D_true.T @ D_cols)
    return float(np.mean(overlaps.max(axis=1) > RECOVERY_THRESHOLD))


# ---------------------------------------------------------------------------
# reference values
# ---------------------------------------------------------------------------

def _fw_exact_linesearch(value_grad, lmo, x, gap_tol, max_iter):
    """Deterministic conditional gradient with one-dimensional exact steps.

    ``value_grad(x)`` returns (value, gradient).  The step uses the slope at
    zero and the value at one, exact for quadratic objectives.  Returns
    (x, achieved duality gap, iterations used).
    """
    val, grad = value_grad(x)
    for it in range(max_iter):
        s = lmo(grad)
        gap = float(grad @ (x - s))
        if gap <= gap_tol:
            return x, gap, it
        d = s - x
        val_one, _ = value_grad(s)
        slope0 = -gap
        curv = val_one - val - slope0  # quadratic coefficient
        if curv <= 0:
            step = 1.0
        else:
            step = min(1.0, max(0.0, -slope0 / (2.0 * curv)))
        if step == 0.0:
            return x, gap, it
        x = x + step * d
        val, grad = value_grad(x)
    s = lmo(grad)
    return x, float(grad @ (x - s)), max_iter


def _lipschitz_probe(grad, x0, iters=40):
    """Power-iteration bound on the gradient map's Lipschitz constant
    (exact for quadratics up to the iteration count)."""
    g0 = grad(x0)
    v = np.ones_like(x0) / math.sqrt(x0.size)
    lam = 1.0
    for _ in range(iters):
        hv = grad(x0 + v) - g0
        lam = float(np.linalg.norm(hv))
        if lam <= 1e-300:
            return 1.0
        v = hv / lam
    return 1.05 * lam


def _certified_projected_min(value_grad, feasible_set, x0, gap_tol, max_iter):
    """Accelerated projected gradient, stopped by the conditional-gradient
    duality-gap certificate <grad, x - lmo(grad)> <= gap_tol.

    Returns (x, achieved gap).  The certificate bounds the suboptimality of
    the returned point regardless of the iterate path that produced it.
    """
    lip = _lipschitz_probe(lambda p: value_grad(p)[1], x0)
    step = 1.0 / max(lip, 1e-12)
    x = feasible_set.project(np.asarray(x0, dtype=float))
    y = x.copy()
    t_m = 1.0
    best_val, best_x, best_gap = math.inf, x, math.inf
    for it in range(max_iter):
        _, grad_y = value_grad(y)
        x_new = feasible_set.project(y - step * grad_y)
        val_new, grad_new = value_grad(x_new)
        if val_new > best_val:  # function restart keeps the scheme monotone
            t_m, y = 1.0, x_new.copy()
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_m * t_m))
        y = x_new + ((t_m - 1.0) / t_new) * (x_new - x)
        x, t_m = x_new, t_new
        if val_new < best_val:
            best_val, best_x = val_new, x_new
        if it % 25 == 0 or it == max_iter - 1:
            gap = float(grad_new @ (x_new - feasible_set.lmo(grad_new)))
            if gap < best_gap:
                best_gap, best_x = gap, x_new
            if gap <= gap_tol:
                return x_new, gap
    return best_x, best_gap


def reference_values(bilevel: BilevelProblem, *, lower_gap_tol: float = 1e-9,
                     f_gap_tol: float = 1e-8, max_iter: int = 200_000,
                     estimate_horizon: int = 3_000) -> ReferenceValues:
    """Compute the lower-level and bilevel optima deterministically.

    The lower optimum always comes from exact conditional gradient over the
    feasible set.  The bilevel optimum uses conditional gradient over the
    analytic solution set when the problem exposes its LMO; otherwise a long
    exact-gradient cutting-plane run provides an estimate whose tolerance is
    flagged in ``f_star_tolerance``.
    """
    if bilevel.lower.kind != "finite_sum":
        raise ReferenceFailureError("lower", math.inf, lower_gap_tol)

    def lower_vg(x):
        return bilevel.lower.full_value(x), bilevel.lower.full_grad(x)

    x_start = bilevel.set.interior_point()
    x_g, gap_g = _certified_projected_min(lower_vg, bilevel.set, x_start,
                                          lower_gap_tol, max_iter)
    if gap_g > lower_gap_tol:
        raise ReferenceFailureError("lower", gap_g, lower_gap_tol)
    g_star = bilevel.lower.full_value(x_g)

    def upper_vg(x):
        return bilevel.upper.full_value(x), bilevel.upper.full_grad(x)

    if bilevel.solution_set_lmo is not None:
        x_f0 = bilevel.solution_set_lmo(np.ones(bilevel.dimension)
                                        / bilevel.dimension)
        x_f, gap_f, _ = _fw_exact_linesearch(upper_vg, bilevel.solution_set_lmo,
                                             x_f0, f_gap_tol, max_iter)
        if gap_f > f_gap_tol:
            raise ReferenceFailureError("bilevel", gap_f, f_gap_tol)
        f_star = bilevel.upper.full_value(x_f)
        f_tol = max(f_gap_tol, gap_f)
    else:
        f_star, f_tol = _estimate_f_star(bilevel, x_g, estimate_horizon)
    return ReferenceValues(g_star=float(g_star), f_star=float(f_star),
                           tolerance=max(lower_gap_tol, gap_g),
                           f_star_tolerance=f_tol)


def _estimate_f_star(bilevel, x_lower_opt, horizon):
    """Exact-gradient cutting-plane conditional gradient from a point at the
    lower optimum, long horizon; the zero-slack cut then tracks the solution
    set tightly."""
    from .core import make_cut_plane  # local import to keep module load light
    from .sets import constrained_lmo

    x = np.asarray(x_lower_opt, dtype=float)
    g_x0 = bilevel.lower.full_value(x)
    half = None
    hint = {}
    for t in range(horizon):
        grad_f = bilevel.upper.full_grad(x)
        grad_g = bilevel.lower.full_grad(x)
        g_val = bilevel.lower.full_value(x)
        plane = make_cut_plane(grad_g, g_val, g_x0, 0.0, x)
        s = constrained_lmo(bilevel.set, grad_f, plane, hint)
        gamma = 2.0 / (t + 2.0)
        x = (1.0 - gamma) * x + gamma * s
        if t == horizon // 2:
            half = bilevel.upper.full_value(x)
    f_end = bilevel.upper.full_value(x)
    tol = max(1e-6, abs(f_end - (half if half is not None else f_end)))
    return f_end, tol
