"""Benders master problem: minimize the epigraph variable over binary sequences.

    min z   s.t.  z >= z_floor
                  z >= a_j(x0) - <psi_j, delta>        (optimality cuts)
                  f_i(x0) + <phi_i, delta> >= -tol     (feasibility cuts)
                  delta in {0,1}^{N n_delta}

Solved by best-bound branch-and-bound over LP relaxations.  Among optimal
sequences the lexicographically smallest one (flattened row-major, 0 < 1)
is returned, so a node with a bound tying the incumbent is only explored if
it may hold a lexicographically smaller sequence.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from scipy.optimize import linprog

from benders_mpc.simplex import DualSimplex, LpSolverError

Z_FLOOR = 0.0
TOL_INT = 1e-6
TOL_CUT = 1e-8
NODE_CAP = 100_000


@dataclass(frozen=True, eq=False)
class BmpSolution:
    delta_star: np.ndarray | None
    z0_star: float
    status: str  # optimal | infeasible | iteration_cap
    nodes: int = 0


class MasterProblem:
    """Cut rows of the BMP at a fixed ``x0`` in affine form."""

    def __init__(self, feas_cuts, opt_cuts, miqp, x0):
        self.N = miqp.N
        self.n_delta = miqp.dims.n_delta
        self.n = self.N * self.n_delta
        x0 = np.asarray(x0, dtype=float)
        n = self.n
        self.feas_const = np.array([x0 @ c.mu0 + c.h_term for c in feas_cuts])
        self.feas_coef = np.array([c.psi.reshape(-1) for c in feas_cuts]).reshape(len(feas_cuts), n)
        # z >= opt_const - opt_coef . delta
        self.opt_const = np.array([c.c_star - x0 @ c.mu0 - c.h_term for c in opt_cuts])
        self.opt_coef = np.array([c.psi.reshape(-1) for c in opt_cuts]).reshape(len(opt_cuts), n)

        m_f, m_o = self.feas_const.size, self.opt_const.size
        # Rows as  A [z; delta] - s = r,  s >= 0.
        A = np.zeros((m_f + m_o, 1 + n))
        r = np.zeros(m_f + m_o)
        A[:m_f, 1:] = self.feas_coef
        r[:m_f] = -self.feas_const - TOL_CUT
        A[m_f:, 0] = 1.0
        A[m_f:, 1:] = self.opt_coef
        r[m_f:] = self.opt_const
        # Row scaling leaves the feasible set unchanged and keeps bases well conditioned.
        scale = np.maximum(1.0, np.abs(A).max(axis=1, initial=0.0))
        A /= scale[:, None]
        r /= scale
        c = np.zeros(1 + n)
        c[0] = 1.0
        lb = np.concatenate([[Z_FLOOR], np.zeros(n)])
        ub = np.concatenate([[np.inf], np.ones(n)])
        self.lp = DualSimplex(A, r, c, lb, ub)
        self._rows = (A, r)
        self.fallbacks = 0

    def value(self, delta_flat):
        """Exact cut value at an integral point, or ``inf`` if a feasibility cut is violated."""
        if self.feas_const.size and np.any(self.feas_const + self.feas_coef @ delta_flat < -TOL_CUT):
            return np.inf
        if self.opt_const.size == 0:
            return Z_FLOOR
        return max(Z_FLOOR, float(np.max(self.opt_const - self.opt_coef @ delta_flat)))

    def relax(self, lo, hi, warm=None):
        lb = np.concatenate([[Z_FLOOR], lo])
        ub = np.concatenate([[np.inf], hi])
        try:
            res = self.lp.solve(lb, ub, warm)
        except LpSolverError:
            try:
                res = self.lp.solve(lb, ub)
            except LpSolverError:
                return self._relax_fallback(lb, ub, lo, hi)
        if res.status != "optimal":
            return None, None, None
        return max(Z_FLOOR, res.x[0]), np.clip(res.x[1:], lo, hi), res.basis

    def _relax_fallback(self, lb, ub, lo, hi):
        """HiGHS dual simplex for the rare relaxation the dense simplex cannot finish."""
        self.fallbacks += 1
        A, r = self._rows
        c = np.zeros(A.shape[1])
        c[0] = 1.0
        res = linprog(c, A_ub=-A, b_ub=-r, bounds=list(zip(lb, ub)), method="highs-ds")
        if res.status == 2:
            return None, None, None
        if res.status != 0:
            raise LpSolverError(f"relaxation fallback failed: {res.message}")
        return max(Z_FLOOR, res.x[0]), np.clip(res.x[1:], lo, hi), None


def _fixed_bounds(n, fixed):
    lo = np.zeros(n)
    hi = np.ones(n)
    if fixed:
        for i, v in dict(fixed).items():
            if v not in (0, 1):
                raise ValueError("fixed values must be 0 or 1")
            lo[i] = hi[i] = v
    return lo, hi


def relax_lp(buffer, miqp, x0, fixed=None):
    """LP relaxation of the BMP with the coordinates in ``fixed`` (index -> 0/1) pinned.

    Returns ``(z0_relaxed, delta_fractional)`` or ``None`` if the relaxation is infeasible.
    """
    mp = MasterProblem(buffer.feas, buffer.opt, miqp, x0)
    lo, hi = _fixed_bounds(mp.n, fixed)
    z, d, _ = mp.relax(lo, hi)
    if z is None:
        return None
    return z, d.reshape(mp.N, mp.n_delta)


def _lex_less(a, b):
    diff = np.flatnonzero(a != b)
    return bool(diff.size) and a[diff[0]] < b[diff[0]]


def solve_bmp(buffer, miqp, x0, extra_feas=(), extra_opt=(), node_cap=NODE_CAP):
    """Solve the master problem to global optimality with the lexicographic tie rule.

    ``extra_feas``/``extra_opt`` are appended to the buffer's cuts (cuts made
    earlier in the same GBD solve).
    """
    feas = list(buffer.feas) + list(extra_feas)
    opt = list(buffer.opt) + list(extra_opt)
    mp = MasterProblem(feas, opt, miqp, x0)
    n = mp.n
    shape = (mp.N, mp.n_delta)
    tol = 1e-9

    inc = None
    inc_val = np.inf

    def offer(cand):
        nonlocal inc, inc_val
        v = mp.value(cand)
        if not np.isfinite(v):
            return
        if inc is None or v < inc_val - tol * max(1.0, abs(inc_val)) or (
            v <= inc_val + tol * max(1.0, abs(inc_val)) and _lex_less(cand, inc)
        ):
            inc, inc_val = cand.copy(), v

    offer(np.zeros(n))
    for c in opt:
        offer(c.delta_star.reshape(-1).astype(float))

    if n == 0:
        if inc is None:
            return BmpSolution(None, np.inf, "infeasible", 0)
        return BmpSolution(inc.reshape(shape).astype(np.int8), inc_val, "optimal", 0)

    lo, hi = np.zeros(n), np.ones(n)
    z, frac, basis = mp.relax(lo, hi)
    nodes = 1
    if z is None:
        return BmpSolution(None, np.inf, "infeasible", nodes)

    def dominated(b, clo):
        if inc is None:
            return False
        thr = tol * max(1.0, abs(inc_val))
        return b > inc_val + thr or (b >= inc_val - thr and not _lex_less(clo, inc))

    # Children enter the queue with the parent's bound and get their LP solved
    # when popped.  Equal bounds pop the node with the lexicographically
    # smallest completion first, so the first tying integral point prunes the
    # rest of the tie.
    counter = 0
    heap = [(z, lo.astype(np.int8).tobytes(), counter, lo, hi, frac, basis)]
    while heap:
        bound, key, _, lo, hi, frac, basis = heapq.heappop(heap)
        if inc is not None and bound > inc_val + tol * max(1.0, abs(inc_val)):
            break  # best-bound order: every remaining node is worse
        if dominated(bound, lo):
            continue
        if frac is None:
            if nodes >= node_cap:
                if inc is None:
                    return BmpSolution(None, np.inf, "iteration_cap", nodes)
                return BmpSolution(inc.reshape(shape).astype(np.int8), inc_val, "iteration_cap", nodes)
            cz, frac, basis = mp.relax(lo, hi, basis)
            nodes += 1
            if cz is None or dominated(cz, lo):
                continue
            if heap and (cz, key) > heap[0][:2]:
                counter += 1
                heapq.heappush(heap, (cz, key, counter, lo, hi, frac, basis))
                continue
            bound = cz
        rounded = np.round(frac)
        integral = np.all(np.abs(frac - rounded) <= TOL_INT)
        if integral:
            offer(rounded)
            free = np.flatnonzero((lo != hi) & (rounded > 0.5))
            if free.size == 0:
                continue
            j = int(free[0])  # a lexicographically smaller tie may remain
        else:
            dist = np.abs(frac - 0.5)
            j = int(np.argmin(dist))  # most fractional, smallest index on ties
        for v in (0.0, 1.0):
            clo, chi = lo.copy(), hi.copy()
            clo[j] = chi[j] = v
            if dominated(bound, clo):
                continue
            counter += 1
            heapq.heappush(heap, (bound, clo.astype(np.int8).tobytes(), counter, clo, chi, None, basis))

    if inc is None:
        return BmpSolution(None, np.inf, "infeasible", nodes)
    return BmpSolution(inc.reshape(shape).astype(np.int8), inc_val, "optimal", nodes)
