"""Ground-truth MIQP solvers used for verification.

``enumerate_miqp`` solves one subproblem per binary sequence.
``bnb_miqp`` is an independent branch-and-bound over QP relaxations in
which ``delta`` becomes a block of continuous inputs in ``[0, 1]``; it
shares no code with the Benders master.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np

from benders_mpc.mld import CompactMiqp, MldSystem, rhs_b, stack_compact
from benders_mpc.qp import _workspace, solve_bsp

ENUM_CAP = 20
BNB_NODE_CAP = 1_000_000


class OracleCapError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OracleResult:
    v_opt: float
    delta_opt: np.ndarray | None
    n_nodes: int
    status: str  # optimal | infeasible


def enumerate_miqp(miqp, x0):
    """Global optimum by solving the subproblem at every binary sequence.

    Ties in cost keep the sequence enumerated first (lexicographically smallest).
    """
    N, nd = miqp.N, miqp.dims.n_delta
    if N * nd > ENUM_CAP:
        raise OracleCapError(f"N*n_delta = {N * nd} exceeds the enumeration cap {ENUM_CAP}")
    best_v, best = math.inf, None
    count = 0
    for bits in itertools.product((0, 1), repeat=N * nd):
        delta = np.array(bits, dtype=np.int8).reshape(N, nd)
        sol = solve_bsp(miqp, x0, delta)
        count += 1
        if sol.feasible and sol.v_star < best_v:
            best_v, best = sol.v_star, delta
    if best is None:
        return OracleResult(math.inf, None, count, "infeasible")
    return OracleResult(best_v, best, count, "optimal")


def _relaxed_miqp(miqp, eps):
    """Stack the system with ``delta`` appended to the inputs and box rows ``0 <= delta <= 1``.

    The binaries get a tiny proximal weight ``eps * ||delta - 1/2||^2`` so the
    relaxed Hessian stays positive definite; callers subtract its maximum,
    ``eps * n / 4``, from relaxation values to keep them valid lower bounds.
    """
    sys = miqp.source
    d = sys.dims
    nd = d.n_delta
    F = np.hstack([sys.F, sys.G])
    H2 = np.vstack(
        [
            np.hstack([sys.H2, sys.H3]),
            np.hstack([np.zeros((nd, d.n_u)), np.eye(nd)]),
            np.hstack([np.zeros((nd, d.n_u)), -np.eye(nd)]),
        ]
    )
    H1 = np.vstack([sys.H1, np.zeros((2 * nd, d.n_x))])
    h = np.concatenate([sys.h, np.ones(nd), np.zeros(nd)])
    relaxed = MldSystem(
        E=sys.E, F=F, G=np.zeros((d.n_x, 0)), H1=H1, H2=H2, H3=np.zeros((d.n_c + 2 * nd, 0)), h=h, dt=sys.dt
    )
    N = miqp.N
    Qs, Rs, xg, ug = [], [], [], []
    for k in range(N):
        xs, us = miqp.state_slice(k), miqp.input_slice(k)
        Qs.append(miqp.Q[xs, xs])
        R = np.zeros((d.n_u + nd, d.n_u + nd))
        R[: d.n_u, : d.n_u] = miqp.Q[us, us]
        R[d.n_u :, d.n_u :] = eps * np.eye(nd)
        Rs.append(R)
        xg.append(miqp.x_g[xs])
    last = miqp.state_slice(N)
    xg.append(miqp.x_g[last])
    rel = stack_compact(relaxed, N, np.array(xg), np.array(Qs), np.array(Rs), miqp.Q[last, last])
    # Shift the binary block of the reference to 1/2.
    x_g = rel.x_g.copy()
    for k in range(N):
        s = rel.input_slice(k)
        x_g[s.start + d.n_u : s.stop] = 0.5
    x_g.setflags(write=False)
    return CompactMiqp(Q=rel.Q, A=rel.A, C=rel.C, x_g=x_g, N=N, source=relaxed)


def bnb_miqp(miqp, x0, eps=1e-3, node_cap=BNB_NODE_CAP, tol=1e-9):
    """Best-bound branch-and-bound on QP relaxations with most-fractional branching."""
    N, nd, n_u = miqp.N, miqp.dims.n_delta, miqp.dims.n_u
    n_bin = N * nd
    if n_bin == 0:
        sol = solve_bsp(miqp, x0, np.zeros((N, 0)))
        if not sol.feasible:
            return OracleResult(math.inf, None, 1, "infeasible")
        return OracleResult(sol.v_star, np.zeros((N, 0), dtype=np.int8), 1, "optimal")

    rel = _relaxed_miqp(miqp, eps)
    base_C, base_h = rel.C, rel.source.h
    n_c = rel.dims.n_c
    # Row index of the upper (<= 1) and lower (>= 0) box for binary j = k*nd + i.
    up_row = np.array([k * n_c + miqp.dims.n_c + i for k in range(N) for i in range(nd)])
    lo_row = up_row + nd
    delta_cols = np.array(
        [rel.input_slice(k).start + n_u + i for k in range(N) for i in range(nd)]
    )
    offset = eps * n_bin / 4.0

    def relax(lo, hi):
        d = np.tile(base_h, N)
        d[up_row] = hi
        d[lo_row] = -lo
        sub = _FixedRhs(rel, d)
        res = sub.solve(x0)
        if res is None:
            return None, None
        v, x = res
        return v - offset, np.clip(x[delta_cols], 0.0, 1.0)

    best_v, best = math.inf, None
    lo, hi = np.zeros(n_bin), np.ones(n_bin)
    bound, frac = relax(lo, hi)
    nodes = 1
    if bound is None:
        return OracleResult(math.inf, None, nodes, "infeasible")
    heap = [(bound, 0, lo, hi, frac)]
    counter = 0
    while heap:
        bound, _, lo, hi, frac = heapq.heappop(heap)
        if bound >= best_v - tol * max(1.0, abs(best_v)):
            break
        free = lo != hi
        dist = np.where(free, np.abs(frac - 0.5), np.inf)
        j = int(np.argmin(dist))
        if dist[j] >= 0.5 - 1e-7:
            # Integral relaxation: evaluate the exact subproblem at the rounded point.
            delta = np.round(frac).astype(np.int8).reshape(N, nd)
            sol = solve_bsp(miqp, x0, delta)
            nodes += 1
            if sol.feasible and sol.v_star < best_v:
                best_v, best = sol.v_star, delta
            free_idx = np.flatnonzero(free)
            if free_idx.size == 0 or (sol.feasible and sol.v_star <= bound + offset + 1e-7 * max(1.0, sol.v_star)):
                continue  # the rounded point attains the node bound
            j = int(free_idx[0])
        for v in (0.0, 1.0):
            clo, chi = lo.copy(), hi.copy()
            clo[j] = chi[j] = v
            cb, cf = relax(clo, chi)
            nodes += 1
            if nodes > node_cap:
                raise OracleCapError("bnb_miqp node cap exceeded")
            if cb is None or cb >= best_v - tol * max(1.0, abs(best_v)):
                continue
            counter += 1
            heapq.heappush(heap, (cb, counter, clo, chi, cf))
    if best is None:
        return OracleResult(math.inf, None, nodes, "infeasible")
    return OracleResult(best_v, best, nodes, "optimal")


class _FixedRhs:
    """Relaxed QP with an explicit inequality right-hand side."""

    def __init__(self, rel, d):
        self.rel = rel
        self.d = d

    def solve(self, x0):
        empty = np.zeros((self.rel.N, 0))
        sol = _workspace(self.rel).solve(rhs_b(self.rel, x0, empty), self.d)
        if not sol.feasible:
            return None
        return sol.v_star, sol.x_star
