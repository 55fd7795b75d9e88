"""Feasible sets with linear-minimization oracles, Euclidean projections,
and the cut-constrained LMO variants solved at every solver iteration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import CutPlane, cut_contains
from .simplex import LpInfeasibleError, solve_lp

__all__ = [
    "InfeasibleCutError",
    "BracketFailureError",
    "FeasibleSet",
    "L1Ball",
    "BallProductBlock",
    "BlockProduct",
    "UniformL1Product",
    "PolytopeByVertices",
    "lmo",
    "project",
    "project_l1",
    "constrained_lmo",
    "constrained_lmo_l1",
    "constrained_lmo_ball_product",
]

CUT_RESIDUAL_TOL = 1e-8
ROOT_TOL = 1e-10
MAX_BISECTIONS = 200
MAX_BRACKET = 2.0 ** 60


class InfeasibleCutError(RuntimeError):
    """The halfspace excludes the entire feasible set."""


class BracketFailureError(RuntimeError):
    """The dual root finder could not bracket a sign change."""


class FeasibleSet:
    """Compact convex set accessed through an LMO and a projection."""

    dimension: int = 0
    diameter: float = 0.0

    def lmo(self, c: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class L1Ball(FeasibleSet):
    """{x : ||x||_1 <= radius} in R^dimension."""

    radius: float
    dimension: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def diameter(self):
        return 2.0 * self.radius

    def lmo(self, c):
        c = np.asarray(c, dtype=float)
        # vertex -radius*sign(c_i)*e_i at the first largest |c_i|; c = 0
        # degenerates to the center, keeping the output deterministic
        i = int(np.argmax(np.abs(c)))
        s = np.zeros(self.dimension)
        s[i] = -self.radius * np.sign(c[i])
        return s

    def project(self, x):
        return project_l1(np.asarray(x, dtype=float), self.radius)

    def contains(self, x, tol=1e-9):
        return float(np.sum(np.abs(x))) <= self.radius + tol

    def interior_point(self):
        return np.zeros(self.dimension)


@dataclass(frozen=True)
class BallProductBlock(FeasibleSet):
    """Product of ``num_blocks`` unit Euclidean balls of dimension block_dim."""

    num_blocks: int
    block_dim: int

    def __post_init__(self):
        if self.num_blocks < 1 or self.block_dim < 1:
            raise ValueError("need at least one block of positive dimension")

    @property
    def dimension(self):
        return self.num_blocks * self.block_dim

    @property
    def diameter(self):
        return 2.0 * math.sqrt(self.num_blocks)

    def _blocks(self, x):
        return np.asarray(x, dtype=float).reshape(self.num_blocks, self.block_dim)

    def lmo(self, c):
        blocks = self._blocks(c)
        norms = np.linalg.norm(blocks, axis=1)
        out = np.zeros_like(blocks)
        nz = norms > 0
        out[nz] = -blocks[nz] / norms[nz, None]
        return out.ravel()

    def project(self, x):
        blocks = self._blocks(x)
        norms = np.linalg.norm(blocks, axis=1)
        scale = np.where(norms > 1.0, 1.0 / np.maximum(norms, 1.0), 1.0)
        return (blocks * scale[:, None]).ravel()

    def contains(self, x, tol=1e-9):
        norms = np.linalg.norm(self._blocks(x), axis=1)
        return bool(np.all(norms <= 1.0 + tol))

    def interior_point(self):
        return np.zeros(self.dimension)


@dataclass(frozen=True)
class UniformL1Product(FeasibleSet):
    """Product of ``num_blocks`` identical l1 balls, vectorized blockwise."""

    radius: float
    num_blocks: int
    block_dim: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.num_blocks < 1 or self.block_dim < 1:
            raise ValueError("need at least one block of positive dimension")

    @property
    def dimension(self):
        return self.num_blocks * self.block_dim

    @property
    def diameter(self):
        return 2.0 * self.radius * math.sqrt(self.num_blocks)

    def _blocks(self, x):
        return np.asarray(x, dtype=float).reshape(self.num_blocks,
                                                  self.block_dim)

    def lmo(self, c):
        blocks = self._blocks(c)
        idx = np.argmax(np.abs(blocks), axis=1)
        rows = np.arange(self.num_blocks)
        out = np.zeros_like(blocks)
        out[rows, idx] = -self.radius * np.sign(blocks[rows, idx])
        return out.ravel()

    def project(self, x):
        blocks = self._blocks(x).copy()
        over = np.sum(np.abs(blocks), axis=1) > self.radius
        for i in np.flatnonzero(over):
            blocks[i] = project_l1(blocks[i], self.radius)
        return blocks.ravel()

    def contains(self, x, tol=1e-9):
        return bool(np.all(np.sum(np.abs(self._blocks(x)), axis=1)
                           <= self.radius + tol))

    def interior_point(self):
        return np.zeros(self.dimension)


@dataclass(frozen=True)
class BlockProduct(FeasibleSet):
    """Cartesian product of feasible-set blocks over consecutive coordinates."""

    blocks: tuple

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("need at least one block")
        offsets = np.cumsum([0] + [b.dimension for b in self.blocks])
        object.__setattr__(self, "_offsets", offsets)

    @property
    def dimension(self):
        return int(self._offsets[-1])

    @property
    def diameter(self):
        return math.sqrt(sum(b.diameter ** 2 for b in self.blocks))

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return [x[self._offsets[i]:self._offsets[i + 1]]
                for i in range(len(self.blocks))]

    def lmo(self, c):
        return np.concatenate([b.lmo(cb) for b, cb in zip(self.blocks, self.split(c))])

    def project(self, x):
        return np.concatenate([b.project(xb) for b, xb in zip(self.blocks, self.split(x))])

    def contains(self, x, tol=1e-9):
        return all(b.contains(xb, tol) for b, xb in zip(self.blocks, self.split(x)))

    def interior_point(self):
        return np.concatenate([b.interior_point() for b in self.blocks])


@dataclass(frozen=True)
class PolytopeByVertices(FeasibleSet):
    """Explicit vertex list; brute-force oracle for small test instances."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices must be finite")
        object.__setattr__(self, "vertices", v)

    @property
    def dimension(self):
        return self.vertices.shape[1]

    @property
    def diameter(self):
        diffs = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((diffs ** 2).sum(axis=2)).max())

    def lmo(self, c):
        scores = self.vertices @ np.asarray(c, dtype=float)
        return self.vertices[int(np.argmin(scores))].copy()

    def contains(self, x, tol=1e-9):
        # membership via an LP in the convex weights
        k = self.vertices.shape[0]
        try:
            solve_lp(np.zeros(k),
                     a_eq=np.vstack([self.vertices.T, np.ones(k)]),
                     b_eq=np.concatenate([np.asarray(x, dtype=float), [1.0]]))
            return True
        except LpInfeasibleError:
            return False

    def interior_point(self):
        return self.vertices.mean(axis=0)


def lmo(feasible_set: FeasibleSet, c) -> np.ndarray:
    """Minimizer of <c, s> over the set."""
    return feasible_set.lmo(c)


def project(feasible_set: FeasibleSet, x) -> np.ndarray:
    """Euclidean projection onto the set."""
    return feasible_set.project(x)


def project_l1(v: np.ndarray, radius: float) -> np.ndarray:
    """Sorting-based Euclidean projection onto the l1 ball."""
    v = np.asarray(v, dtype=float)
    if np.sum(np.abs(v)) <= radius:
        return v.copy()
    u = np.sort(np.abs(v))[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = int(np.nonzero(u * j > css - radius)[0][-1])
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def _check_cut_feasible(feasible_set, plane):
    """Raise unless some point of the set satisfies the halfspace."""
    deepest = feasible_set.lmo(plane.normal)
    if plane.gap(deepest) < 0:
        raise InfeasibleCutError(
            f"cut excludes the set (best slack {plane.gap(deepest):.3e})")
    return deepest


_BRACKET_GRID = 2.0 ** np.arange(-24.0, 66.0, 2.0)
_UNIT_GRID = np.arange(1, 33) / 33.0
_HINT_GRID = 2.0 ** np.arange(-3.0, 3.5, 0.5)


def _l1_cut_dual(c, n, b, radius, mu_hint=0.0, edge_hint=None):
    """Scalar-dual solution of min <c,s> s.t. ||s||_1 <= r, <n,s> <= b.

    For multiplier mu the inner minimizer over the ball is the vertex picked
    by c + mu*n, whose cut residual is nonincreasing in mu.  Grid refinement
    brackets the breakpoint (seeded near ``mu_hint`` when given); once the
    bracket isolates a single vertex swap, the two vertices' crossing gives
    the exact dual optimum and their convex combination on the plane is
    optimal by strong duality.  Returns (point, multiplier), or ``None`` to
    send the caller to the exact LP fallback.
    """
    d = c.size

    def tops(mus):
        z = c[None, :] + mus[:, None] * n[None, :]
        np.abs(z, out=z)
        k = np.argmax(z, axis=1)
        sign = np.where(c[k] + mus * n[k] >= 0, 1.0, -1.0)
        return k, sign, -radius * sign * n[k]

    def scan(mus):
        k, sgn, dots = tops(mus)
        inside = dots <= b
        if not inside.any():
            return (mus[-1], k[-1], sgn[-1]), None
        j = int(np.argmax(inside))
        lo_t = (mus[j - 1], k[j - 1], sgn[j - 1]) if j > 0 else None
        return lo_t, (mus[j], k[j], sgn[j])

    def exact_from_edge(out_t, in_t):
        # both branches are lines s*(c_k + mu*n_k); their crossing is mu*
        _, k_out, s_out = out_t
        _, k_in, s_in = in_t
        denom = s_out * n[k_out] - s_in * n[k_in]
        if abs(denom) < 1e-300:
            return None
        mu_x = (s_in * c[k_in] - s_out * c[k_out]) / denom
        if mu_x < 0:
            return None
        top = s_out * (c[k_out] + mu_x * n[k_out])
        envelope = float(np.max(np.abs(c + mu_x * n)))
        if not envelope <= top * (1.0 + 1e-12) + 1e-300:
            return None  # a third line is above: bracket not yet isolated
        d_out = -radius * s_out * n[k_out]
        d_in = -radius * s_in * n[k_in]
        if not d_in <= b <= d_out or d_out - d_in < 1e-300:
            return None
        a = (b - d_in) / (d_out - d_in)
        s = np.zeros(d)
        s[k_in] += (1.0 - a) * (-radius * s_in)
        s[k_out] += a * (-radius * s_out)
        return s, mu_x, (k_out, s_out, k_in, s_in)

    if edge_hint is not None and edge_hint[0] < d and edge_hint[2] < d:
        res = exact_from_edge((0.0,) + tuple(edge_hint[:2]),
                              (0.0,) + tuple(edge_hint[2:]))
        if res is not None:
            return res  # the previous edge still certifies optimal

    k0, s0, dot0 = tops(np.array([0.0]))
    if dot0[0] <= b:
        return None  # plain LMO was feasible; caller handles that case
    zero_t = (0.0, k0[0], s0[0])

    lo_t = hi_t = None
    if mu_hint > 0.0 and np.isfinite(mu_hint):
        lo_c, hi_c = scan(mu_hint * _HINT_GRID)
        if hi_c is not None:
            lo_t, hi_t = (lo_c if lo_c is not None else zero_t), hi_c
    if hi_t is None:
        lo_c, hi_c = scan(_BRACKET_GRID)
        if hi_c is None:
            return None
        lo_t, hi_t = (lo_c if lo_c is not None else zero_t), hi_c

    for _ in range(12):
        res = exact_from_edge(lo_t, hi_t)
        if res is not None:
            return res
        lo, hi = lo_t[0], hi_t[0]
        if hi - lo <= 1e-13 * max(hi, 1.0):
            break
        lo_c, hi_c = scan(lo + (hi - lo) * _UNIT_GRID)
        if hi_c is not None:
            hi_t = hi_c
            lo_t = lo_c if lo_c is not None else lo_t
        else:
            lo_t = lo_c
    return None


def constrained_lmo_l1(c, plane: CutPlane, radius: float,
                       hint: Optional[dict] = None) -> np.ndarray:
    """Exact solution of min <c, s> over the l1 ball intersected with a cut.

    A scalar dual solve handles the common case (seeded by ``hint['mu']``
    across consecutive calls when given); anything numerically ambiguous
    falls back to the exact LP on the split s = s_plus - s_minus, whose l1
    constraint is a single simplex row.
    """
    c = np.asarray(c, dtype=float)
    ball = L1Ball(radius, c.size)
    u = ball.lmo(c)
    if cut_contains(plane, u):
        return u
    _check_cut_feasible(ball, plane)
    n = np.asarray(plane.normal, dtype=float)
    b = plane.offset + float(n @ plane.anchor)
    res = _l1_cut_dual(c, n, b, radius,
                       mu_hint=hint.get("mu", 0.0) if hint else 0.0,
                       edge_hint=hint.get("edge") if hint else None)
    if res is not None:
        s, mu, edge = res
        if np.sum(np.abs(s)) <= radius + 1e-9 and plane.gap(s) >= -1e-9:
            if hint is not None:
                hint["mu"] = mu
                hint["edge"] = edge
            return s
    split_cost = np.concatenate([c, -c])
    a_ub = np.vstack([np.ones(2 * c.size),
                      np.concatenate([n, -n])])
    b_ub = np.array([radius, b])
    x = solve_lp(split_cost, a_ub=a_ub, b_ub=b_ub)
    s = x[:c.size] - x[c.size:]
    if np.sum(np.abs(s)) > radius + 1e-9 or plane.gap(s) < -1e-9:
        raise RuntimeError("LP solution violates its own constraints")
    return s


def _ball_blocks_point(w, offsets, uniform_dim=None):
    """Blockwise -w_b/||w_b|| (zero blocks stay at the center)."""
    if uniform_dim is not None:
        blocks = w.reshape(-1, uniform_dim)
        norms = np.linalg.norm(blocks, axis=1)
        np.maximum(norms, 1e-300, out=norms)
        out = blocks / norms[:, None]
        np.negative(out, out=out)
        out[norms <= 1e-300] = 0.0
        return out.ravel()
    out = np.zeros_like(w)
    for a, b in offsets:
        nb = math.sqrt(float(w[a:b] @ w[a:b]))
        if nb > 0:
            out[a:b] = -w[a:b] / nb
    return out


def constrained_lmo_ball_product(c, plane: CutPlane,
                                 block_dims: Sequence[int],
                                 hint: Optional[dict] = None) -> np.ndarray:
    """Min <c, s> over a product of unit balls intersected with a cut.

    The dual candidate S(lam) normalizes -(c_b + lam*normal_b) per block; the
    cut residual h(lam) is monotone, so an inactive cut returns S(0) and an
    active one is solved by bracketed bisection on lam.
    """
    c = np.asarray(c, dtype=float)
    n = np.asarray(plane.normal, dtype=float)
    ends = np.cumsum(block_dims)
    starts = np.concatenate([[0], ends[:-1]])
    offsets = list(zip(starts, ends))
    if ends[-1] != c.size:
        raise ValueError("block dims do not cover the vector")
    uniform = block_dims[0] if len(set(block_dims)) == 1 else None

    # blockwise quadratics make the cut residual of the dual candidate a
    # scalar function: h(lam) = -sum_b (nc_b + lam*nn_b)/||c_b + lam*n_b|| - b0
    cc = np.add.reduceat(c * c, starts)
    nc = np.add.reduceat(c * n, starts)
    nn = np.add.reduceat(n * n, starts)
    b0 = plane.offset + float(n @ plane.anchor)

    def h_fast(lam):
        # O(num_blocks) via the precomputed quadratics; cancellation-prone
        # exactly where a block's direction vanishes
        denom2 = cc + lam * (2.0 * nc + lam * nn)
        np.maximum(denom2, 0.0, out=denom2)
        mask = denom2 > 0.0
        return -float(np.sum((nc[mask] + lam * nn[mask])
                             / np.sqrt(denom2[mask]))) - b0

    def candidate(lam):
        return _ball_blocks_point(c + lam * n, offsets, uniform)

    def h_exact(lam):
        return -plane.gap(candidate(lam))

    def drive(fn, lo, f_lo, hi, f_hi):
        # Illinois-style false position on a nonincreasing residual, with a
        # forced bisection every few steps; maintains fn(hi) <= 0 < fn(lo)
        eff_lo, eff_hi = f_lo, f_hi
        last = 0
        for it in range(MAX_BISECTIONS):
            if -f_hi <= ROOT_TOL or hi - lo <= 1e-16 * max(hi, 1.0):
                break
            if it % 4 == 3 or eff_hi == eff_lo:
                lam = 0.5 * (lo + hi)
            else:
                lam = (lo * eff_hi - hi * eff_lo) / (eff_hi - eff_lo)
                if not lo < lam < hi:
                    lam = 0.5 * (lo + hi)
            val = fn(lam)
            if val <= 0:
                hi, f_hi, eff_hi = lam, val, val
                if last == -1:
                    eff_lo *= 0.5
                last = -1
            else:
                lo, f_lo, eff_lo = lam, val, val
                if last == 1:
                    eff_hi *= 0.5
                last = 1
        return lo, f_lo, hi, f_hi

    if h_exact(0.0) <= 0:
        return candidate(0.0)
    # lam -> inf limit: blocks align with -n_b (zero-normal blocks drop out)
    slack_at_inf = -float(np.sum(np.sqrt(nn))) - b0
    if slack_at_inf > 0:
        raise InfeasibleCutError(
            f"cut excludes the ball product (best slack {-slack_at_inf:.3e})")

    lo, h_lo = 0.0, h_fast(0.0)
    hi = 1.0
    if hint:
        seed = hint.get("lam", 0.0)
        if seed > 0.0 and np.isfinite(seed):
            half = h_fast(0.5 * seed)
            if half > 0:
                lo, h_lo = 0.5 * seed, half
            hi = max(2.0 * seed, 1e-12)
    h_hi = h_fast(hi)
    while h_hi > 0:
        lo, h_lo = hi, h_hi
        hi *= 2.0
        if hi > MAX_BRACKET:
            raise BracketFailureError("no sign change within the bracket cap")
        h_hi = h_fast(hi)
    lo, h_lo, hi, h_hi = drive(h_fast, lo, h_lo, hi, h_hi)

    # polish against the exact residual (the fast form can misplace the
    # feasible side by rounding near a breakpoint)
    h_hi = h_exact(hi)
    while h_hi > 0:
        lo, h_lo = hi, h_hi
        hi = max(2.0 * hi, 1e-12)
        if hi > MAX_BRACKET:
            raise BracketFailureError("no sign change within the bracket cap")
        h_hi = h_exact(hi)
    lo, h_lo, hi, h_hi = drive(h_exact, lo, max(h_lo, 0.0), hi, h_hi)
    if hint is not None:
        hint["lam"] = hi
    out = candidate(hi)
    residual = -plane.gap(out)
    if residual > ROOT_TOL:
        # h jumped across zero: some block's c_b + lam*n_b vanished at the
        # breakpoint, leaving that block free in the Lagrangian; point it
        # along -n_b just far enough to land on the plane
        w = c + hi * n
        scale = np.sqrt(cc) + hi * np.sqrt(nn) + 1e-300
        block_w = np.sqrt(np.add.reduceat(w * w, starts))
        vanishing = np.flatnonzero(block_w <= 1e-7 * scale)
        for bi in vanishing:
            a, e = offsets[bi]
            out[a:e] = 0.0
        residual = -plane.gap(out)
        for bi in vanishing:
            a, e = offsets[bi]
            norm_nb = math.sqrt(nn[bi])
            if norm_nb <= 0 or residual <= 0:
                continue
            t = min(residual / norm_nb, 1.0)
            out[a:e] = -t * n[a:e] / norm_nb
            residual -= t * norm_nb
    if -plane.gap(out) > CUT_RESIDUAL_TOL:
        raise BracketFailureError(
            f"ball-product recovery left residual {-plane.gap(out):.3e}")
    return out


def _constrained_lmo_l1_blocks(c, plane, radii, block_dims):
    """Joint LP over several l1 blocks sharing one cut row."""
    c = np.asarray(c, dtype=float)
    n = np.asarray(plane.normal, dtype=float)
    d = c.size
    ends = np.cumsum(block_dims)
    starts = np.concatenate([[0], ends[:-1]])
    rows = []
    for a, b in zip(starts, ends):
        row = np.zeros(2 * d)
        row[a:b] = 1.0
        row[d + a:d + b] = 1.0
        rows.append(row)
    rows.append(np.concatenate([n, -n]))
    b_ub = np.concatenate([radii, [plane.offset + float(n @ plane.anchor)]])
    x = solve_lp(np.concatenate([c, -c]), a_ub=np.vstack(rows), b_ub=b_ub)
    return x[:d] - x[d:]


def _constrained_lmo_polytope(poly: PolytopeByVertices, c, plane):
    """Brute force: vertices inside the cut plus edge/plane crossings."""
    c = np.asarray(c, dtype=float)
    verts = poly.vertices
    gaps = np.array([plane.gap(v) for v in verts])
    candidates = [v for v, g in zip(verts, gaps) if g >= 0]
    n = np.asarray(plane.normal, dtype=float)
    for i in range(len(verts)):
        for j in range(i + 1, len(verts)):
            denom = float(n @ (verts[j] - verts[i]))
            if abs(denom) < 1e-14:
                continue
            tau = (gaps[i]) / denom  # gap_i - tau*denom = 0
            if 0.0 <= tau <= 1.0:
                candidates.append(verts[i] + tau * (verts[j] - verts[i]))
    if not candidates:
        raise InfeasibleCutError("cut excludes the polytope")
    scores = [float(c @ s) for s in candidates]
    return np.asarray(candidates[int(np.argmin(scores))], dtype=float)


def constrained_lmo(feasible_set: FeasibleSet, c, plane: CutPlane,
                    hint: Optional[dict] = None) -> np.ndarray:
    """Min <c, s> over the set intersected with a cut halfspace.

    Blocks of a product on which the cut normal vanishes are solved by their
    plain LMO; the cut binds only the remaining coordinates.  ``hint`` is an
    optional mutable dict carrying dual warm starts between calls.
    """
    c = np.asarray(c, dtype=float)
    u = feasible_set.lmo(c)
    if cut_contains(plane, u):
        return u
    if isinstance(feasible_set, L1Ball):
        return constrained_lmo_l1(c, plane, feasible_set.radius, hint)
    if isinstance(feasible_set, BallProductBlock):
        return constrained_lmo_ball_product(
            c, plane, [feasible_set.block_dim] * feasible_set.num_blocks, hint)
    if isinstance(feasible_set, UniformL1Product):
        _check_cut_feasible(feasible_set, plane)
        return _constrained_lmo_l1_blocks(
            c, plane, [feasible_set.radius] * feasible_set.num_blocks,
            [feasible_set.block_dim] * feasible_set.num_blocks)
    if isinstance(feasible_set, PolytopeByVertices):
        _check_cut_feasible(feasible_set, plane)
        return _constrained_lmo_polytope(feasible_set, c, plane)
    if isinstance(feasible_set, BlockProduct):
        return _constrained_lmo_block_product(feasible_set, c, plane, hint)
    raise NotImplementedError(f"no constrained LMO for {type(feasible_set).__name__}")


def _constrained_lmo_block_product(prod: BlockProduct, c, plane, hint=None):
    normal_parts = prod.split(plane.normal)
    c_parts = prod.split(c)
    anchor_parts = prod.split(plane.anchor)
    active = [i for i, nb in enumerate(normal_parts) if np.any(nb)]
    out = [None] * len(prod.blocks)
    for i, block in enumerate(prod.blocks):
        if i not in active:
            out[i] = block.lmo(c_parts[i])
    if active:
        sub_c = np.concatenate([c_parts[i] for i in active])
        sub_n = np.concatenate([normal_parts[i] for i in active])
        sub_anchor = np.concatenate([anchor_parts[i] for i in active])
        sub_plane = CutPlane(sub_n, sub_anchor, plane.offset)
        acts = [prod.blocks[i] for i in active]
        if all(isinstance(b, BallProductBlock) for b in acts):
            dims = [b.block_dim for b in acts for _ in range(b.num_blocks)]
            sub = constrained_lmo_ball_product(sub_c, sub_plane, dims, hint)
        elif all(isinstance(b, (L1Ball, UniformL1Product)) for b in acts):
            if len(acts) == 1 and isinstance(acts[0], L1Ball):
                sub = constrained_lmo_l1(sub_c, sub_plane, acts[0].radius)
            else:
                radii, dims = [], []
                for blk in acts:
                    if isinstance(blk, L1Ball):
                        radii.append(blk.radius)
                        dims.append(blk.dimension)
                    else:
                        radii += [blk.radius] * blk.num_blocks
                        dims += [blk.block_dim] * blk.num_blocks
                splits = np.cumsum([b.dimension for b in acts])[:-1]
                deepest = np.concatenate(
                    [b.lmo(nb) for b, nb in zip(acts, np.split(sub_n, splits))])
                if sub_plane.gap(deepest) < 0:
                    raise InfeasibleCutError("cut excludes the l1 blocks")
                sub = _constrained_lmo_l1_blocks(sub_c, sub_plane, radii, dims)
        else:
            raise NotImplementedError("cut touches blocks of mixed types")
        pos = 0
        for i in active:
            d = prod.blocks[i].dimension
            out[i] = sub[pos:pos + d]
            pos += d
    result = np.concatenate(out)
    if plane.gap(result) < -CUT_RESIDUAL_TOL:
        raise RuntimeError("block-product LMO violates the cut")
    return result
