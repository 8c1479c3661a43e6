"""Feasibility and optimality cuts, their evaluation, and the FIFO cut buffer.

Both cut types are affine in ``delta`` for fixed ``x0``:

    b(x0, delta)^T mu + d(delta)^T pi
        = x0^T mu[0] + sum_k h^T pi[k] + sum_k psi[k]^T delta[k]

so a cut is stored as its dual payload plus the precomputed pieces needed
to evaluate it quickly (``psi``, ``mu[0]``, and ``sum_k h^T pi[k]``).
Moving a cut to a new initial state only changes the ``x0^T mu[0]`` term.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from benders_mpc.mld import dual_delta_coefficients, rhs_b, rhs_d


class DegenerateCertificateError(ValueError):
    """Raised for an all-zero Farkas certificate, which excludes nothing."""


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeasibilityCut:
    """``b(x0, delta)^T mu_f + d(delta)^T pi_f >= 0`` from a Farkas certificate."""

    mu_f: np.ndarray
    pi_f: np.ndarray
    origin_x0: np.ndarray
    origin_delta: np.ndarray
    psi: np.ndarray = field(repr=False)
    mu0: np.ndarray = field(repr=False)
    h_term: float = 0.0

    def affine(self):
        """``(const, psi)`` so the cut reads ``const + <psi, delta> >= 0`` at the bound ``x0``."""
        return self.h_term, self.psi


@dataclass(frozen=True, eq=False)
class OptimalityCut:
    """``z >= c_star - b(x0, delta)^T mu - d(delta)^T pi`` from an optimal BSP solve."""

    x0_star: np.ndarray
    delta_star: np.ndarray
    v_star: float
    mu: np.ndarray
    pi: np.ndarray
    c_star: float
    psi: np.ndarray = field(repr=False)
    mu0: np.ndarray = field(repr=False)
    h_term: float = 0.0


def _pieces(miqp, mu, pi):
    psi = dual_delta_coefficients(miqp, mu, pi)
    n_x = miqp.dims.n_x
    pi_blocks = np.asarray(pi).reshape(miqp.N, miqp.dims.n_c)
    h_term = float(np.sum(pi_blocks @ miqp.source.h))
    return _frozen(psi), _frozen(mu[:n_x]), h_term


def make_feasibility_cut(miqp, x0, delta, cert):
    mu_f = np.asarray(cert.mu_f, dtype=float)
    pi_f = np.asarray(cert.pi_f, dtype=float)
    if not (np.any(mu_f) or np.any(pi_f)):
        raise DegenerateCertificateError("all-zero Farkas certificate")
    psi, mu0, h_term = _pieces(miqp, mu_f, pi_f)
    return FeasibilityCut(
        mu_f=_frozen(mu_f),
        pi_f=_frozen(pi_f),
        origin_x0=_frozen(x0),
        origin_delta=_frozen(miqp.check_delta(delta)),
        psi=psi,
        mu0=mu0,
        h_term=h_term,
    )


def make_optimality_cut(miqp, x0, delta, sol):
    delta = miqp.check_delta(delta)
    mu = np.asarray(sol.mu, dtype=float)
    pi = np.asarray(sol.pi, dtype=float)
    b = rhs_b(miqp, x0, delta)
    d = rhs_d(miqp, delta)
    c_star = float(sol.v_star + b @ mu + d @ pi)
    psi, mu0, h_term = _pieces(miqp, mu, pi)
    return OptimalityCut(
        x0_star=_frozen(x0),
        delta_star=_frozen(delta),
        v_star=float(sol.v_star),
        mu=_frozen(mu),
        pi=_frozen(pi),
        c_star=c_star,
        psi=psi,
        mu0=mu0,
        h_term=h_term,
    )


def eval_feasibility_cut(cut, miqp, x0, delta):
    """Left-hand side ``b^T mu_f + d^T pi_f``; negative means ``delta`` is cut off at ``x0``."""
    delta = np.asarray(delta, dtype=float).reshape(cut.psi.shape)
    return float(np.asarray(x0, dtype=float) @ cut.mu0 + cut.h_term + np.sum(cut.psi * delta))


def eval_optimality_cut(cut, miqp, x0, delta):
    """Cut value ``c_star - b(x0, delta)^T mu - d(delta)^T pi``."""
    delta = np.asarray(delta, dtype=float).reshape(cut.psi.shape)
    return float(
        cut.c_star - np.asarray(x0, dtype=float) @ cut.mu0 - cut.h_term - np.sum(cut.psi * delta)
    )


def eval_optimality_cut_direct(cut, miqp, x0, delta):
    """Same value as :func:`eval_optimality_cut`, computed from the full right-hand sides."""
    return float(cut.c_star - rhs_b(miqp, x0, delta) @ cut.mu - rhs_d(miqp, delta) @ cut.pi)


def eval_feasibility_cut_direct(cut, miqp, x0, delta):
    return float(rhs_b(miqp, x0, delta) @ cut.mu_f + rhs_d(miqp, delta) @ cut.pi_f)


class CutBuffer:
    """Two FIFO stores of cuts with fixed capacities.

    ``x0`` is the initial state the stored cuts are currently evaluated at;
    :meth:`transfer` rebinds it without touching any payload.
    """

    def __init__(self, K_feas, K_opt, x0=None):
        if K_feas < 0 or K_opt < 0:
            raise ValueError("buffer capacities must be non-negative")
        self.K_feas = int(K_feas)
        self.K_opt = int(K_opt)
        self.feas = deque()
        self.opt = deque()
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)

    def __len__(self):
        return len(self.feas) + len(self.opt)

    def copy(self):
        other = CutBuffer(self.K_feas, self.K_opt, self.x0)
        other.feas = deque(self.feas)
        other.opt = deque(self.opt)
        return other

    def transfer(self, x0_new):
        self.x0 = np.asarray(x0_new, dtype=float)
        return self

    def store(self, new_feas=(), new_opt=()):
        """Append new cuts and evict the oldest beyond capacity."""
        for cut in new_feas:
            self.feas.append(cut)
        for cut in new_opt:
            self.opt.append(cut)
        while len(self.feas) > self.K_feas:
            self.feas.popleft()
        while len(self.opt) > self.K_opt:
            self.opt.popleft()
        return self

    def to_dict(self):
        return {
            "K_feas": self.K_feas,
            "K_opt": self.K_opt,
            "x0": None if self.x0 is None else self.x0.tolist(),
            "feas": [
                {
                    "mu_f": c.mu_f.tolist(),
                    "pi_f": c.pi_f.tolist(),
                    "origin_x0": c.origin_x0.tolist(),
                    "origin_delta": c.origin_delta.tolist(),
                }
                for c in self.feas
            ],
            "opt": [
                {
                    "x0_star": c.x0_star.tolist(),
                    "delta_star": c.delta_star.tolist(),
                    "v_star": c.v_star,
                    "mu": c.mu.tolist(),
                    "pi": c.pi.tolist(),
                    "c_star": c.c_star,
                }
                for c in self.opt
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data, miqp):
        buf = cls(data["K_feas"], data["K_opt"], data.get("x0"))
        for rec in data["feas"]:
            mu_f = np.asarray(rec["mu_f"], dtype=float)
            pi_f = np.asarray(rec["pi_f"], dtype=float)
            psi, mu0, h_term = _pieces(miqp, mu_f, pi_f)
            buf.feas.append(
                FeasibilityCut(
                    mu_f=_frozen(mu_f),
                    pi_f=_frozen(pi_f),
                    origin_x0=_frozen(rec["origin_x0"]),
                    origin_delta=_frozen(np.asarray(rec["origin_delta"]).reshape(miqp.N, -1)),
                    psi=psi,
                    mu0=mu0,
                    h_term=h_term,
                )
            )
        for rec in data["opt"]:
            mu = np.asarray(rec["mu"], dtype=float)
            pi = np.asarray(rec["pi"], dtype=float)
            psi, mu0, h_term = _pieces(miqp, mu, pi)
            buf.opt.append(
                OptimalityCut(
                    x0_star=_frozen(rec["x0_star"]),
                    delta_star=_frozen(np.asarray(rec["delta_star"]).reshape(miqp.N, -1)),
                    v_star=float(rec["v_star"]),
                    mu=_frozen(mu),
                    pi=_frozen(pi),
                    c_star=float(rec["c_star"]),
                    psi=psi,
                    mu0=mu0,
                    h_term=h_term,
                )
            )
        buf.store()
        return buf

    @classmethod
    def from_json(cls, text, miqp):
        return cls.from_dict(json.loads(text), miqp)


def store(buffer, new_feas, new_opt, K_feas=None, K_opt=None):
    """FIFO storage step; capacities default to the buffer's own."""
    if K_feas is not None:
        buffer.K_feas = int(K_feas)
    if K_opt is not None:
        buffer.K_opt = int(K_opt)
    if buffer.K_feas < 0 or buffer.K_opt < 0:
        raise ValueError("buffer capacities must be non-negative")
    return buffer.store(new_feas, new_opt)


def transfer(buffer, x0_new):
    return buffer.transfer(x0_new)
