"""Two-phase revised simplex, sized for occupation-measure LPs of a few thousand columns.

The basis is refactorized from the original matrix at every pivot, so
rounding does not accumulate across the many degenerate pivots these LPs take.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

TOL = 1e-9

OPTIMAL, ITERATION_LIMIT, INFEASIBLE, UNBOUNDED = 0, 1, 2, 3


class LpError(RuntimeError):
    pass


@dataclass
class LpResult:
    x: np.ndarray
    fun: float
    status: int
    iterations: int
    # sensitivities of the optimal value to the right-hand sides (scipy's "marginals" convention)
    duals_ub: np.ndarray
    duals_eq: np.ndarray

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


def _simplex(A, b, cost, basis, allowed, max_iter, tol):
    """Minimize cost.x over {A x = b, x >= 0} from a feasible basis; only `allowed` columns may enter.

    Dantzig pricing with a two-pass ratio test that takes the largest pivot among
    near-tied rows. Degenerate pivots are where these LPs spend their time, and
    choosing rows by index there drifts into near-singular bases. If a basis
    repeats within a degenerate stretch, Bland's rule takes over until the
    objective moves again.
    """
    m = A.shape[0]
    cscale = max(1.0, float(np.abs(cost).max(initial=0.0)))
    bland = False
    seen: set[bytes] = set()
    last_obj = np.inf
    for it in range(max_iter):
        lu = lu_factor(A[:, basis])
        xb = lu_solve(lu, b)
        y = lu_solve(lu, cost[basis], trans=1)
        obj = float(cost[basis] @ xb)
        if obj < last_obj - tol * cscale:
            seen.clear()
            bland = False
            last_obj = obj
        else:
            key = np.sort(basis).tobytes()
            if key in seen:
                bland = True
            seen.add(key)
        red = cost - A.T @ y
        red[basis] = 0.0
        cand = np.flatnonzero(allowed & (red < -tol * cscale))
        if len(cand) == 0:
            return OPTIMAL, it, basis, xb, y
        col = int(cand[0]) if bland else int(cand[np.argmin(red[cand])])
        u = lu_solve(lu, A[:, col])
        ok = u > tol * max(1.0, float(np.abs(u).max(initial=0.0)))
        if not ok.any():
            return UNBOUNDED, it, basis, xb, y
        xpos = np.maximum(xb, 0.0)
        ratios = np.full(m, np.inf)
        ratios[ok] = xpos[ok] / u[ok]
        if bland:
            ties = np.flatnonzero(ratios <= ratios.min() + tol)
            row = int(min(ties, key=lambda i: basis[i]))
        else:
            bound = np.min((xpos[ok] + tol) / u[ok])
            ties = np.flatnonzero(ratios <= bound)
            row = int(ties[np.argmax(u[ties])])
        basis = basis.copy()
        basis[row] = col
    return ITERATION_LIMIT, max_iter, basis, None, None


def linprog(
    c,
    A_ub=None,
    b_ub=None,
    A_eq=None,
    b_eq=None,
    max_iter: int = 50_000,
    tol: float = TOL,
) -> LpResult:
    """min c.x subject to A_ub x <= b_ub, A_eq x = b_eq, x >= 0."""
    c = np.asarray(c, dtype=np.float64)
    n = len(c)
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=np.float64).reshape(-1, n)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=np.float64).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=np.float64)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64)
    mu, me = len(b_ub), len(b_eq)
    m = mu + me
    # columns: originals, slacks (one per <= row), artificials (one per row, signed so they start at |b|)
    nv = n + mu
    A = np.zeros((m, nv + m))
    A[:mu, :n] = A_ub
    A[:mu, n:nv] = np.eye(mu)
    A[mu:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    A[:, nv:] = np.diag(np.where(b < 0, -1.0, 1.0))
    basis = np.arange(nv, nv + m)
    allowed = np.zeros(nv + m, dtype=bool)
    allowed[:nv] = True

    phase1 = np.zeros(nv + m)
    phase1[nv:] = 1.0
    status, it1, basis, xb, _ = _simplex(A, b, phase1, basis, allowed, max_iter, tol)
    if status != OPTIMAL:
        return _fail(status, it1, n, mu, me)
    if xb[basis >= nv].sum() > tol * max(1.0, float(np.abs(b).max(initial=0.0))):
        return _fail(INFEASIBLE, it1, n, mu, me)

    # swap zero-level artificials for real columns where possible; the rest sit on redundant rows
    lu = lu_factor(A[:, basis])
    for i in np.flatnonzero(basis >= nv):
        rowv = lu_solve(lu, np.eye(m)[i], trans=1) @ A[:, :nv]
        rowv[basis[basis < nv]] = 0.0
        cand = np.flatnonzero(np.abs(rowv) > 1e-7)
        if len(cand):
            basis[i] = int(cand[0])
            lu = lu_factor(A[:, basis])

    cost = np.concatenate([c, np.zeros(mu + m)])
    status, it2, basis, xb, y = _simplex(A, b, cost, basis, allowed, max_iter, tol)
    if status != OPTIMAL:
        return _fail(status, it1 + it2, n, mu, me)
    xfull = np.zeros(nv + m)
    xfull[basis] = np.maximum(xb, 0.0)
    x = xfull[:n]
    return LpResult(x, float(c @ x), OPTIMAL, it1 + it2, y[:mu], y[mu:])


def _fail(status, its, n, mu, me) -> LpResult:
    return LpResult(np.full(n, np.nan), np.nan, status, its, np.full(mu, np.nan), np.full(me, np.nan))
