"""Dense bounded-variable dual simplex for small LPs.

Solves

    min c^T x   s.t.   A x - s = r,  s >= 0,  lb <= x <= ub

starting from the all-slack basis.  That basis is dual feasible whenever
every structural column can rest at a bound matching the sign of its cost
(``c_j > 0`` needs a finite lower bound, ``c_j < 0`` a finite upper one),
which holds for the Benders master relaxation.  Changing bounds keeps a
basis dual feasible, so branch-and-bound children warm start from their
parent's basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TOL_PRIMAL = 1e-9
_TOL_PIVOT = 1e-9
_TOL_DUAL = 1e-9


class LpSolverError(RuntimeError):
    pass


@dataclass
class LpResult:
    status: str  # "optimal" or "infeasible"
    x: np.ndarray | None
    obj: float
    basis: tuple | None
    iterations: int


class DualSimplex:
    def __init__(self, A, r, c, lb, ub):
        A = np.asarray(A, dtype=float)
        self.m, self.n = A.shape
        m, n = self.m, self.n
        self.M = np.hstack([A, -np.eye(m)])
        self.r = np.asarray(r, dtype=float)
        self.c = np.concatenate([np.asarray(c, dtype=float), np.zeros(m)])
        self.lb = np.concatenate([np.asarray(lb, dtype=float), np.zeros(m)])
        self.ub = np.concatenate([np.asarray(ub, dtype=float), np.full(m, np.inf)])
        self.max_iter = 50 * (m + n) + 50

    def solve(self, lb=None, ub=None, warm=None):
        n, m = self.n, self.m
        L = self.lb.copy()
        U = self.ub.copy()
        if lb is not None:
            L[:n] = lb
        if ub is not None:
            U[:n] = ub
        if np.any(L > U):
            return LpResult("infeasible", None, np.inf, None, 0)
        c, M = self.c, self.M

        if warm is None:
            basis = np.arange(n, n + m)
            at_upper = self.c < 0
            Binv = -np.eye(m)
        else:
            basis = warm[0].copy()
            at_upper = warm[1].copy()
            Binv = warm[2].copy() if len(warm) > 2 else self._invert(basis)
        is_basic = np.zeros(n + m, dtype=bool)
        is_basic[basis] = True
        fixed = L == U
        finite_L = np.isfinite(L)
        finite_U = np.isfinite(U)

        it = 0
        bland = False
        since_refactor = 0
        exact = warm is None or len(warm) <= 2  # Binv not yet touched by updates
        while True:
            # Nonbasic values; resting side must be finite and dual feasible.
            y = c[basis] @ Binv if m else np.zeros(0)
            d = c - y @ M
            free_nb = ~is_basic & ~fixed
            to_lower = free_nb & at_upper & finite_L & (~finite_U | (d > _TOL_PIVOT))
            to_upper = free_nb & ~at_upper & finite_U & (~finite_L | (d < -_TOL_PIVOT))
            at_upper[to_lower] = False
            at_upper[to_upper] = True
            # Rounding can leave tiny wrong-signed reduced costs on half-bounded columns.
            wrong = free_nb & ((at_upper & (d > 1e-6)) | (~at_upper & (d < -1e-6)))
            if wrong.any() or (free_nb & ~np.where(at_upper, finite_U, finite_L)).any():
                if not exact:
                    # Drift in the updated inverse: refactor and re-check.
                    Binv = self._invert(basis)
                    since_refactor, exact = 0, True
                    continue
                raise LpSolverError("lost dual feasibility")
            xv = np.where(at_upper, U, L)
            xv[is_basic] = 0.0
            xB = Binv @ (self.r - M @ xv) if m else np.zeros(0)

            LB, UB = L[basis], U[basis]
            scale = 1.0 + np.abs(xB)
            below = (LB - xB) / scale
            above = (xB - UB) / scale
            infeas = np.maximum(below, above)
            if m == 0 or infeas.max() <= _TOL_PRIMAL:
                xv[basis] = xB
                obj = float(c @ xv)
                return LpResult("optimal", xv[:n].copy(), obj, (basis.copy(), at_upper.copy(), Binv), it)

            it += 1
            if it > self.max_iter:
                raise LpSolverError("dual simplex iteration cap exceeded")
            if not bland and it > 5 * (m + n):
                bland = True
            if bland:
                cand = np.flatnonzero(infeas > _TOL_PRIMAL)
                row = int(cand[np.argmin(basis[cand])])
            else:
                row = int(np.argmax(infeas))
            go_below = below[row] >= above[row]

            alpha = Binv[row] @ M
            nb = ~is_basic & ~fixed
            if go_below:
                elig = nb & (((~at_upper) & (alpha < -_TOL_PIVOT)) | (at_upper & (alpha > _TOL_PIVOT)))
            else:
                elig = nb & (((~at_upper) & (alpha > _TOL_PIVOT)) | (at_upper & (alpha < -_TOL_PIVOT)))
            cols = np.flatnonzero(elig)
            if cols.size == 0:
                return LpResult("infeasible", None, np.inf, None, it)
            # Harris two-pass ratio test: relax ties by the dual tolerance, then
            # take the largest pivot (smallest index among equals).
            abs_a = np.abs(alpha[cols])
            abs_d = np.maximum(np.where(at_upper[cols], -d[cols], d[cols]), 0.0)
            t_max = ((abs_d + _TOL_DUAL) / abs_a).min()
            near = np.flatnonzero(abs_d / abs_a <= t_max)
            q = int(cols[near[np.argmax(abs_a[near])]])
            leaving = basis[row]
            a_q = Binv @ M[:, q]
            piv = a_q[row]
            Binv[row] /= piv
            a_q[row] = 0.0
            Binv -= np.outer(a_q, Binv[row])
            basis[row] = q
            is_basic[q] = True
            is_basic[leaving] = False
            at_upper[leaving] = not go_below
            at_upper[q] = False
            since_refactor += 1
            exact = False
            if since_refactor >= 50:
                Binv = self._invert(basis)
                since_refactor, exact = 0, True

    def _invert(self, basis):
        try:
            return np.linalg.inv(self.M[:, basis])
        except np.linalg.LinAlgError:
            raise LpSolverError("singular basis") from None
