"""Benders subproblem: strictly convex QP at fixed binaries.

The equality constraints ``A x = b`` of the stacked problem determine every
state from ``x0``, the inputs and ``delta``, so the QP is solved in the input
coordinates ``x = x_p(b) + Z y``.  The reduced problem

    min 1/2 y^T H y + g^T y   s.t.  M y <= c

is solved by a dual active-set method (Goldfarb-Idnani).  When a violated
constraint is a non-positive combination of the active ones the dual is
unbounded along a ray, and that ray is the Farkas certificate.  Equality
duals are recovered exactly from stationarity on the state columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from benders_mpc.mld import DimensionError, rhs_b, rhs_d
from benders_mpc.simplex import DualSimplex, LpSolverError

TOL_KKT = 1e-8
_TOL_VIOL = 1e-9
_TOL_DEP = 1e-9


class QpSolverError(RuntimeError):
    """Numerical failure of the QP solver (iteration cap, cycling)."""


class _ReducedInfeasible(Exception):
    def __init__(self, weights):
        super().__init__("reduced QP infeasible")
        self.weights = weights


@dataclass(frozen=True, eq=False)
class QpSolution:
    x_star: np.ndarray
    v_star: float
    mu: np.ndarray
    pi: np.ndarray
    iterations: int = 0

    feasible = True


@dataclass(frozen=True, eq=False)
class FarkasCertificate:
    mu_f: np.ndarray
    pi_f: np.ndarray

    feasible = False


def dual_qp(L_chol, g, Nt, c, max_iter):
    """Dual active-set solve of ``min 1/2 y'Hy + g'y`` s.t. ``M y <= c``.

    ``L_chol`` is the lower Cholesky factor of ``H`` and ``Nt`` the matrix
    ``L^{-1} M^T`` with unit-norm columns (rows of ``M`` pre-scaled so that
    this holds; zero rows must be removed by the caller).  Works in the
    coordinates ``w = L^T y`` where the Hessian is the identity.

    Returns ``(y, multipliers, active, iterations)``; raises
    ``_ReducedInfeasible`` carrying non-negative row weights ``lam`` with
    ``M^T lam ~ 0`` and ``c^T lam < 0``.
    """
    n, m = Nt.shape
    g_t = solve_triangular(L_chol, g, lower=True)
    w = -g_t
    active = []
    u = np.zeros(0)
    is_active = np.zeros(m, dtype=bool)
    # Rows found linearly dependent on the active set with only a rounding-level
    # violation; they are implied by the active rows and left out.
    implied = np.zeros(m, dtype=bool)
    c_scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    it = 0
    while True:
        s = Nt.T @ w - c
        s[is_active | implied] = -np.inf
        p = int(np.argmax(s)) if m else 0
        if m == 0 or s[p] <= _TOL_VIOL:
            break
        s_p = s[p]
        n_p = Nt[:, p]
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise QpSolverError(f"dual active-set exceeded {max_iter} iterations")
            if active:
                Qa, Ra = np.linalg.qr(Nt[:, active])
                proj = Qa.T @ n_p
                r = solve_triangular(Ra, proj)
                z = n_p - Qa @ proj
            else:
                r = np.zeros(0)
                z = n_p
            zz = float(z @ z)
            t1 = s_p / zz if zz > _TOL_DEP**2 else np.inf
            t2, k_block = np.inf, -1
            for k, rk in enumerate(r):
                if rk > 1e-12:
                    ratio = u[k] / rk
                    if ratio < t2:
                        t2, k_block = ratio, k
            if not np.isfinite(t1) and not np.isfinite(t2):
                lam = np.zeros(m)
                lam[p] = 1.0
                lam[active] = np.maximum(-r, 0.0)
                if u_p > 0 or c @ lam < -1e-9 * c_scale * max(1.0, lam.max()):
                    raise _ReducedInfeasible(lam)
                implied[p] = True
                break
            if t2 < t1:
                if np.isfinite(t1):
                    w = w - t2 * z
                    s_p -= t2 * zz
                u = u - t2 * r
                u_p += t2
                del active[k_block]
                u = np.delete(u, k_block)
                is_active[:] = False
                is_active[active] = True
                implied[:] = False
                continue
            w = w - t1 * z
            u = np.append(u - t1 * r, u_p + t1)
            active.append(p)
            is_active[p] = True
            break

    # Polish on the final active set to make stationarity exact.
    if active:
        Na = Nt[:, active]
        sol, *_ = np.linalg.lstsq(Na.T @ Na, -(Na.T @ g_t) - c[active], rcond=None)
        if np.all(sol >= -1e-9 * max(1.0, np.abs(sol).max())):
            u = np.maximum(sol, 0.0)
            w = -g_t - Na @ u
    y = solve_triangular(L_chol.T, w, lower=False)
    return y, u, list(active), it


class BspWorkspace:
    """Precomputed reduction of the stacked BSP for one ``CompactMiqp``."""

    def __init__(self, miqp):
        self.miqp = miqp
        A, C, Q = miqp.A, miqp.C, miqp.Q
        self.sc = miqp._state_columns
        self.ic = miqp._input_columns
        A_S = A[:, self.sc]
        A_U = A[:, self.ic]
        self.A_S = A_S
        A_S_inv = np.linalg.solve(A_S, np.eye(A_S.shape[0]))
        n = miqp.n_var
        # x = P b + Z y
        self.P = np.zeros((n, A.shape[0]))
        self.P[self.sc] = A_S_inv
        self.Z = np.zeros((n, self.ic.size))
        self.Z[self.sc] = -A_S_inv @ A_U
        self.Z[self.ic] = np.eye(self.ic.size)
        H = 2.0 * self.Z.T @ Q @ self.Z
        H = 0.5 * (H + H.T)
        self.L = np.linalg.cholesky(H)
        M = C @ self.Z
        Nt = solve_triangular(self.L, M.T, lower=True)
        norms = np.linalg.norm(Nt, axis=0)
        scale = max(1.0, norms.max(initial=0.0))
        self.nonzero = np.flatnonzero(norms > 1e-12 * scale)
        self.zero_rows = np.flatnonzero(norms <= 1e-12 * scale)
        self.row_norm = norms[self.nonzero]
        self.Nt = Nt[:, self.nonzero] / self.row_norm
        self.M = M
        self.scale_rows = np.maximum(np.abs(M).max(axis=1), 1e-12)
        self.max_iter = 50 * max(1, C.shape[0])
        self.sparse_certificates = True

    def _sparsify(self, lam, c):
        """Replace a Farkas ray by a vertex of ``{lam >= 0, M^T lam = 0, c^T lam = -1}``.

        Minimizing the (row-scaled) weight sum picks a basic solution, i.e. a
        minimal infeasible subset of rows, which depends on fewer binaries
        than the ray produced by the active-set path.  Falls back to the
        original ray if the LP fails.
        """
        rows = np.flatnonzero(np.abs(self.M).max(axis=1) > 0)
        Mr = self.M[rows] / self.scale_rows[rows, None]
        cr = c[rows] / self.scale_rows[rows]
        A = np.vstack([Mr.T, -Mr.T, -cr[None, :]])
        r = np.concatenate([np.zeros(2 * Mr.shape[1]), [1.0]])
        lp = DualSimplex(A, r, np.ones(rows.size), np.zeros(rows.size), np.full(rows.size, np.inf))
        try:
            res = lp.solve()
        except LpSolverError:
            return lam
        if res.status != "optimal":
            return lam
        # Polish on the support so the ray identity holds to rounding.
        supp = np.flatnonzero(res.x > 1e-12 * max(1.0, res.x.max()))
        K = np.vstack([Mr[supp].T, cr[supp][None, :]])
        rhs = np.zeros(K.shape[0])
        rhs[-1] = -1.0
        w, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if np.any(w < 0):
            return lam
        cand = np.zeros(c.size)
        cand[rows[supp]] = w / self.scale_rows[rows[supp]]
        ray = self.M.T @ cand
        if c @ cand < 0 and np.abs(ray).max() <= 1e-10 * np.abs(cand).max():
            return cand
        return lam

    def solve(self, b, d):
        miqp = self.miqp
        x_p = self.P @ b
        c = d - miqp.C @ x_p
        # Rows independent of the inputs: 0 <= c_i must hold outright.
        if self.zero_rows.size:
            bad = self.zero_rows[c[self.zero_rows] < -_TOL_VIOL * max(1.0, np.abs(c).max())]
            if bad.size:
                i = int(bad[np.argmin(c[bad])])
                lam = np.zeros(c.size)
                lam[i] = 1.0
                return self._certificate(lam, b, d)
        g = 2.0 * self.Z.T @ (miqp.Q @ (x_p - miqp.x_g))
        c_scaled = c[self.nonzero] / self.row_norm
        try:
            y, u, active, it = dual_qp(self.L, g, self.Nt, c_scaled, self.max_iter)
        except _ReducedInfeasible as exc:
            lam = np.zeros(c.size)
            lam[self.nonzero] = exc.weights / self.row_norm
            if self.sparse_certificates:
                lam = self._sparsify(lam, c)
            return self._certificate(lam, b, d)
        pi = np.zeros(c.size)
        pi[self.nonzero[active]] = u / self.row_norm[active]
        x = x_p + self.Z @ y
        grad = 2.0 * miqp.Q @ (x - miqp.x_g) + miqp.C.T @ pi
        mu = -np.linalg.solve(self.A_S.T, grad[self.sc])
        r = x - miqp.x_g
        v = float(r @ miqp.Q @ r)
        return QpSolution(x_star=x, v_star=v, mu=mu, pi=pi, iterations=it)

    def _certificate(self, lam, b, d):
        miqp = self.miqp
        pi = lam
        mu = -np.linalg.solve(self.A_S.T, (miqp.C.T @ pi)[self.sc])
        scale = max(np.abs(mu).max(initial=0.0), np.abs(pi).max(initial=0.0))
        if scale == 0.0 or not np.isfinite(scale):
            raise QpSolverError("degenerate infeasibility certificate")
        mu, pi = mu / scale, pi / scale
        if b @ mu + d @ pi >= 0.0:
            raise QpSolverError("infeasibility certificate failed the Farkas sign test")
        return FarkasCertificate(mu_f=mu, pi_f=pi)


def _workspace(miqp):
    ws = miqp.__dict__.get("_bsp_workspace")
    if ws is None:
        ws = BspWorkspace(miqp)
        miqp.__dict__["_bsp_workspace"] = ws
    return ws


def solve_bsp(miqp, x0, delta):
    """Solve the Benders subproblem at ``(x0, delta)``.

    Returns a :class:`QpSolution` or, if the subproblem is infeasible, a
    :class:`FarkasCertificate` normalized to unit infinity norm.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != miqp.dims.n_x:
        raise DimensionError(f"x0 has length {x0.size}, expected {miqp.dims.n_x}")
    delta = miqp.check_delta(delta)
    return _workspace(miqp).solve(rhs_b(miqp, x0, delta), rhs_d(miqp, delta))


def dual_objective(miqp, x0, delta, mu, pi):
    """Dual function of the BSP at ``(mu, pi)``; a lower bound on ``v`` whenever ``pi >= 0``."""
    w = miqp.A.T @ mu + miqp.C.T @ pi
    Qinv_w = _workspace_qinv(miqp) @ w
    b = rhs_b(miqp, x0, delta)
    d = rhs_d(miqp, delta)
    return float(-0.25 * w @ Qinv_w + miqp.x_g @ w - b @ mu - d @ pi)


def _workspace_qinv(miqp):
    Qinv = miqp.__dict__.get("_q_inverse")
    if Qinv is None:
        Qinv = np.linalg.inv(miqp.Q)
        miqp.__dict__["_q_inverse"] = Qinv
    return Qinv


def kkt_residuals(miqp, x0, delta, sol):
    """Stationarity, complementarity and primal residuals of a QP solution."""
    b = rhs_b(miqp, x0, delta)
    d = rhs_d(miqp, delta)
    x = sol.x_star
    stat = 2.0 * miqp.Q @ (x - miqp.x_g) + miqp.A.T @ sol.mu + miqp.C.T @ sol.pi
    slack = miqp.C @ x - d
    return {
        "stationarity": float(np.abs(stat).max()),
        "complementarity": float(np.abs(sol.pi * slack).max(initial=0.0)),
        "equality": float(np.abs(miqp.A @ x - b).max()),
        "inequality": float(max(0.0, slack.max(initial=0.0))),
        "dual_sign": float(max(0.0, -sol.pi.min(initial=0.0))),
    }


def farkas_residuals(miqp, x0, delta, cert):
    b = rhs_b(miqp, x0, delta)
    d = rhs_d(miqp, delta)
    ray = miqp.A.T @ cert.mu_f + miqp.C.T @ cert.pi_f
    return {
        "ray": float(np.abs(ray).max()),
        "scale": float(max(1.0, np.abs(cert.mu_f).max(), np.abs(cert.pi_f).max())),
        "sign": float(b @ cert.mu_f + d @ cert.pi_f),
        "dual_sign": float(max(0.0, -cert.pi_f.min(initial=0.0))),
    }
