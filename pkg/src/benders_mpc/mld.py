"""Mixed-logical dynamical systems and their horizon-stacked MIQP form.

The stacked decision vector is ``[x0, u0, x1, u1, ..., x_{N-1}, u_{N-1}, xN]``
and the binary sequence is stored as an ``(N, n_delta)`` integer array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class DimensionError(ValueError):
    """Raised when matrix or vector shapes are inconsistent."""


@dataclass(frozen=True)
class MldDims:
    n_x: int
    n_u: int
    n_delta: int
    n_c: int


def _as_matrix(a, rows, cols, name):
    m = np.asarray(a, dtype=float)
    if m.size == 0:
        m = m.reshape(rows, cols)
    if m.ndim != 2 or m.shape != (rows, cols):
        raise DimensionError(f"{name} has shape {m.shape}, expected {(rows, cols)}")
    return m


@dataclass(frozen=True, eq=False)
class MldSystem:
    """Discrete-time MLD system.

    ``x[k+1] = E x[k] + F u[k] + G delta[k]`` subject to
    ``H1 x[k] + H2 u[k] + H3 delta[k] <= h``.
    """

    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    H3: np.ndarray
    h: np.ndarray
    dt: float = 0.02
    dims: MldDims = field(init=False)

    def __post_init__(self):
        E = np.asarray(self.E, dtype=float)
        if E.ndim != 2 or E.shape[0] != E.shape[1] or E.shape[0] == 0:
            raise DimensionError(f"E must be square and non-empty, got {E.shape}")
        n_x = E.shape[0]
        F = np.asarray(self.F, dtype=float)
        if F.ndim != 2 or F.shape[0] != n_x:
            raise DimensionError(f"F has shape {F.shape}, expected ({n_x}, n_u)")
        n_u = F.shape[1]
        h = np.asarray(self.h, dtype=float).reshape(-1)
        n_c = h.size
        G = np.asarray(self.G, dtype=float)
        n_delta = G.shape[1] if G.ndim == 2 else 0
        if G.size == 0:
            G = G.reshape(n_x, n_delta)
        G = _as_matrix(G, n_x, n_delta, "G")
        H1 = _as_matrix(self.H1, n_c, n_x, "H1")
        H2 = _as_matrix(self.H2, n_c, n_u, "H2")
        H3 = _as_matrix(self.H3, n_c, n_delta, "H3")
        if not np.all(np.isfinite(h)):
            raise ValueError("h must be finite")
        if n_u == 0:
            raise DimensionError("at least one continuous input is required")
        for name, value in (("E", E), ("F", F), ("G", G), ("H1", H1), ("H2", H2), ("H3", H3), ("h", h)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "dims", MldDims(n_x, n_u, n_delta, n_c))

    def step(self, x, u, delta, noise=None):
        """One step of the dynamics, optionally with an additive disturbance."""
        x_next = self.E @ x + self.F @ u + self.G @ np.asarray(delta, dtype=float)
        if noise is not None:
            x_next = x_next + noise
        return x_next

    def constraint_slack(self, x, u, delta):
        """``h - (H1 x + H2 u + H3 delta)``; non-negative entries are satisfied rows."""
        return self.h - (self.H1 @ x + self.H2 @ u + self.H3 @ np.asarray(delta, dtype=float))

    def to_dict(self):
        d = self.dims
        return {
            "E": self.E.tolist(),
            "F": self.F.tolist(),
            "G": self.G.tolist(),
            "H1": self.H1.tolist(),
            "H2": self.H2.tolist(),
            "H3": self.H3.tolist(),
            "h": self.h.tolist(),
            "dims": {"n_x": d.n_x, "n_u": d.n_u, "n_delta": d.n_delta, "n_c": d.n_c},
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, data):
        dims = data.get("dims", {})
        n_x = int(dims.get("n_x", len(data["E"])))
        n_delta = int(dims.get("n_delta", 0))
        n_c = int(dims.get("n_c", len(data["h"])))
        G = np.asarray(data["G"], dtype=float).reshape(n_x, n_delta)
        H3 = np.asarray(data["H3"], dtype=float).reshape(n_c, n_delta)
        H1 = np.asarray(data["H1"], dtype=float).reshape(n_c, n_x)
        n_u = int(dims.get("n_u", np.asarray(data["F"]).shape[1]))
        H2 = np.asarray(data["H2"], dtype=float).reshape(n_c, n_u)
        sys = cls(E=data["E"], F=data["F"], G=G, H1=H1, H2=H2, H3=H3, h=data["h"], dt=data.get("dt", 0.02))
        if dims and (sys.dims.n_u != n_u):
            raise DimensionError("dims do not match matrices")
        return sys

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def expm(M, terms=14):
    """Matrix exponential by Taylor series with scaling and squaring."""
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M, 1)
    squarings = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    S = M / (2.0**squarings)
    result = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, max(terms, 10) + 1):
        term = term @ S / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


def discretize_zoh(Ec, Fc, Gc, dt):
    """Zero-order-hold discretization of ``xdot = Ec x + Fc u + Gc delta``.

    Returns ``(E, F, G)``.
    """
    Ec = np.asarray(Ec, dtype=float)
    n_x = Ec.shape[0]
    Fc = np.asarray(Fc, dtype=float).reshape(n_x, -1)
    Gc = np.asarray(Gc, dtype=float).reshape(n_x, -1)
    n_in = Fc.shape[1] + Gc.shape[1]
    aug = np.zeros((n_x + n_in, n_x + n_in))
    aug[:n_x, :n_x] = Ec
    aug[:n_x, n_x:] = np.hstack([Fc, Gc])
    phi = expm(aug * dt)
    E = phi[:n_x, :n_x]
    F = phi[:n_x, n_x : n_x + Fc.shape[1]]
    G = phi[:n_x, n_x + Fc.shape[1] :]
    return E, F, G


def binary_sequence(values, N, n_delta):
    """Validate and return a binary sequence as an ``(N, n_delta)`` int8 array."""
    arr = np.asarray(values)
    if arr.size != N * n_delta:
        raise DimensionError(f"binary sequence has {arr.size} entries, expected {N * n_delta}")
    arr = arr.reshape(N, n_delta)
    rounded = np.rint(arr)
    if not np.all((rounded == 0) | (rounded == 1)) or not np.allclose(arr, rounded, atol=0, rtol=0):
        raise ValueError("binary sequence entries must be exactly 0 or 1")
    return rounded.astype(np.int8)


def _symmetric_pd(M, n, name):
    M = _as_matrix(M, n, n, name)
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return M


@dataclass(frozen=True, eq=False)
class CompactMiqp:
    """Horizon-stacked MIQP ``min ||x - x_g||_Q^2`` s.t. ``A x = b(x0, delta)``, ``C x <= d(delta)``."""

    Q: np.ndarray
    A: np.ndarray
    C: np.ndarray
    x_g: np.ndarray
    N: int
    source: MldSystem

    @property
    def dims(self):
        return self.source.dims

    @property
    def n_var(self):
        d = self.dims
        return self.N * (d.n_x + d.n_u) + d.n_x

    @property
    def n_binary(self):
        return self.N * self.dims.n_delta

    def state_slice(self, k):
        d = self.dims
        start = k * (d.n_x + d.n_u)
        return slice(start, start + d.n_x)

    def input_slice(self, k):
        d = self.dims
        start = k * (d.n_x + d.n_u) + d.n_x
        return slice(start, start + d.n_u)

    def states(self, x):
        """Reshape a stacked primal vector into an ``(N+1, n_x)`` state trajectory."""
        return np.array([x[self.state_slice(k)] for k in range(self.N + 1)])

    def inputs(self, x):
        return np.array([x[self.input_slice(k)] for k in range(self.N)])

    def check_delta(self, delta):
        return binary_sequence(delta, self.N, self.dims.n_delta)

    @cached_property
    def _state_columns(self):
        return np.concatenate([np.arange(self.n_var)[self.state_slice(k)] for k in range(self.N + 1)])

    @cached_property
    def _input_columns(self):
        if self.N == 0:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(self.n_var)[self.input_slice(k)] for k in range(self.N)])


def stack_compact(sys, N, x_g_per_step, Q_k, R_k, Q_N):
    """Stack an MLD system over horizon ``N`` into its compact MIQP.

    ``x_g_per_step`` is either a single state (broadcast over the horizon) or
    ``N + 1`` states.  ``Q_k`` and ``R_k`` may be single matrices or sequences
    of ``N`` matrices.
    """
    if int(N) != N or N < 1:
        raise ValueError("horizon N must be a positive integer")
    N = int(N)
    d = sys.dims
    n_x, n_u, n_c = d.n_x, d.n_u, d.n_c

    xg = np.asarray(x_g_per_step, dtype=float)
    if xg.ndim == 1:
        if xg.size != n_x:
            raise DimensionError(f"reference has length {xg.size}, expected {n_x}")
        xg = np.tile(xg, (N + 1, 1))
    if xg.shape != (N + 1, n_x):
        raise DimensionError(f"reference has shape {xg.shape}, expected {(N + 1, n_x)}")

    def per_step(W, n, name):
        W = np.asarray(W, dtype=float)
        if W.ndim == 2:
            W = np.broadcast_to(W, (N, *W.shape))
        if W.shape != (N, n, n):
            raise DimensionError(f"{name} has shape {W.shape}, expected ({N}, {n}, {n})")
        return [_symmetric_pd(W[k], n, name) for k in range(N)]

    Qs = per_step(Q_k, n_x, "Q_k")
    Rs = per_step(R_k, n_u, "R_k")
    QN = _symmetric_pd(Q_N, n_x, "Q_N")

    n_var = N * (n_x + n_u) + n_x
    Q = np.zeros((n_var, n_var))
    A = np.zeros(((N + 1) * n_x, n_var))
    C = np.zeros((N * n_c, n_var))
    x_g = np.zeros(n_var)
    blk = n_x + n_u

    A[:n_x, :n_x] = np.eye(n_x)
    for k in range(N):
        xs = slice(k * blk, k * blk + n_x)
        us = slice(k * blk + n_x, (k + 1) * blk)
        xn = slice((k + 1) * blk, (k + 1) * blk + n_x)
        Q[xs, xs] = Qs[k]
        Q[us, us] = Rs[k]
        x_g[xs] = xg[k]
        rows = slice((k + 1) * n_x, (k + 2) * n_x)
        A[rows, xs] = -sys.E
        A[rows, us] = -sys.F
        A[rows, xn] = np.eye(n_x)
        crow = slice(k * n_c, (k + 1) * n_c)
        C[crow, xs] = sys.H1
        C[crow, us] = sys.H2
    last = slice(N * blk, N * blk + n_x)
    Q[last, last] = QN
    x_g[last] = xg[N]

    for arr in (Q, A, C, x_g):
        arr.setflags(write=False)
    return CompactMiqp(Q=Q, A=A, C=C, x_g=x_g, N=N, source=sys)


def rhs_b(miqp, x0, delta):
    """Equality right-hand side ``[x0; G delta[0]; ...; G delta[N-1]]``."""
    d = miqp.dims
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != d.n_x:
        raise DimensionError(f"x0 has length {x0.size}, expected {d.n_x}")
    delta = np.asarray(delta, dtype=float).reshape(miqp.N, d.n_delta)
    return np.concatenate([x0, (delta @ miqp.source.G.T).reshape(-1)])


def rhs_d(miqp, delta):
    """Inequality right-hand side; block ``k`` is ``h - H3 delta[k]``."""
    d = miqp.dims
    delta = np.asarray(delta, dtype=float).reshape(miqp.N, d.n_delta)
    return (miqp.source.h[None, :] - delta @ miqp.source.H3.T).reshape(-1)


def dual_delta_coefficients(miqp, mu, pi):
    """Per-step coefficients ``psi[k] = G^T mu[k+1] - H3^T pi[k]``.

    With these, ``b(x0, delta)^T mu + d(delta)^T pi`` equals
    ``x0^T mu[0] + sum_k h^T pi[k] + sum_k psi[k]^T delta[k]``.
    """
    d = miqp.dims
    mu_blocks = np.asarray(mu, dtype=float).reshape(miqp.N + 1, d.n_x)
    pi_blocks = np.asarray(pi, dtype=float).reshape(miqp.N, d.n_c)
    return mu_blocks[1:] @ miqp.source.G - pi_blocks @ miqp.source.H3


def simulate_nominal(miqp, x0, delta, u_seq):
    """Forward-simulate the nominal dynamics and return the stacked primal vector."""
    sys = miqp.source
    delta = np.asarray(delta, dtype=float).reshape(miqp.N, sys.dims.n_delta)
    x = np.zeros(miqp.n_var)
    state = np.asarray(x0, dtype=float)
    for k in range(miqp.N):
        x[miqp.state_slice(k)] = state
        x[miqp.input_slice(k)] = u_seq[k]
        state = sys.step(state, u_seq[k], delta[k])
    x[miqp.state_slice(miqp.N)] = state
    return x
