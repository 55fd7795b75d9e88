"""Dense two-phase primal simplex for the small LP subproblems.

Solves ``min c @ x  s.t.  A_ub @ x <= b_ub, A_eq @ x == b_eq, x >= 0``.
Sized for the cut-constrained LMO reformulations (a handful of rows, up to a
few thousand columns); Bland's rule guards against cycling.
"""

from __future__ import annotations

import numpy as np

PIVOT_TOL = 1e-11
FEAS_TOL = 1e-9

__all__ = ["LpError", "LpInfeasibleError", "LpUnboundedError", "solve_lp"]


class LpError(RuntimeError):
    pass


class LpInfeasibleError(LpError):
    pass


class LpUnboundedError(LpError):
    pass


def _pivot(tableau, basis, row, col):
    tableau[row] /= tableau[row, col]
    for i in range(tableau.shape[0]):
        if i != row and abs(tableau[i, col]) > 0.0:
            tableau[i] -= tableau[i, col] * tableau[row]
    basis[row] = col


def _bland_iterate(tableau, basis, costs, max_pivots):
    """Run simplex pivots with Bland's rule until optimal or unbounded."""
    for _ in range(max_pivots):
        # reduced costs r_j = c_j - c_B @ (B^-1 A)_j
        reduced = costs - costs[basis] @ tableau[:, :-1]
        negative = np.flatnonzero(reduced < -PIVOT_TOL)
        if negative.size == 0:
            return
        entering = int(negative[0])  # smallest index (Bland)
        col = tableau[:, entering]
        positive = col > PIVOT_TOL
        if not np.any(positive):
            raise LpUnboundedError("objective unbounded below")
        ratios = np.full(col.shape, np.inf)
        ratios[positive] = tableau[positive, -1] / col[positive]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_TOL)
        leave = int(ties[np.argmin(basis[ties])])  # smallest basis index
        _pivot(tableau, basis, leave, entering)
    raise LpError("pivot limit exceeded")


def solve_lp(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None, max_pivots=None):
    """Minimize ``c @ x`` over ``x >= 0`` under <= and == row constraints."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    n = c.size
    rows, rhs, senses = [], [], []
    if a_ub is not None:
        a_ub = np.atleast_2d(np.asarray(a_ub, dtype=float))
        for row, b in zip(a_ub, np.atleast_1d(b_ub)):
            rows.append(row)
            rhs.append(float(b))
            senses.append("L")
    if a_eq is not None:
        a_eq = np.atleast_2d(np.asarray(a_eq, dtype=float))
        for row, b in zip(a_eq, np.atleast_1d(b_eq)):
            rows.append(row)
            rhs.append(float(b))
            senses.append("E")
    m = len(rows)
    if m == 0:
        if np.any(c < -PIVOT_TOL):
            raise LpUnboundedError("free nonnegative variable with negative cost")
        return np.zeros(n)

    A = np.array(rows, dtype=float)
    b = np.array(rhs, dtype=float)
    # normalize to b >= 0; a flipped <= row becomes a >= row (surplus column)
    for i in range(m):
        if b[i] < 0:
            A[i] *= -1.0
            b[i] *= -1.0
            senses[i] = {"L": "G", "G": "L", "E": "E"}[senses[i]]

    slack_cols, art_rows = [], []
    for i, sense in enumerate(senses):
        col = np.zeros(m)
        if sense == "L":
            col[i] = 1.0
            slack_cols.append((col, i))
        elif sense == "G":
            col[i] = -1.0
            slack_cols.append((col, None))
            art_rows.append(i)
        else:
            art_rows.append(i)

    n_slack = len(slack_cols)
    n_art = len(art_rows)
    width = n + n_slack + n_art + 1
    tableau = np.zeros((m, width))
    tableau[:, :n] = A
    tableau[:, -1] = b
    basis = np.full(m, -1, dtype=int)
    for j, (col, basic_row) in enumerate(slack_cols):
        tableau[:, n + j] = col
        if basic_row is not None:
            basis[basic_row] = n + j
    for j, i in enumerate(art_rows):
        tableau[i, n + n_slack + j] = 1.0
        basis[i] = n + n_slack + j

    if max_pivots is None:
        max_pivots = 200 + 25 * (m + width)

    if n_art:
        phase1 = np.zeros(width - 1)
        phase1[n + n_slack:] = 1.0
        _bland_iterate(tableau, basis, phase1, max_pivots)
        if phase1[basis] @ tableau[:, -1] > FEAS_TOL:
            raise LpInfeasibleError("phase-1 optimum is positive")
        # drive leftover artificials out of the basis, dropping redundant rows
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= n + n_slack:
                nz = np.flatnonzero(np.abs(tableau[i, :n + n_slack]) > PIVOT_TOL)
                if nz.size:
                    _pivot(tableau, basis, i, int(nz[0]))
                else:
                    keep[i] = False
        tableau = tableau[keep]
        basis = basis[keep]

    tableau = np.hstack([tableau[:, :n + n_slack], tableau[:, -1:]])
    costs = np.concatenate([c, np.zeros(n_slack)])
    _bland_iterate(tableau, basis, costs, max_pivots)

    x = np.zeros(n + n_slack)
    x[basis] = tableau[:, -1]
    return x[:n]
