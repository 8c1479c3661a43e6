"""A-priori bounds on the gap between a transferred optimality cut and the true cost.

A stored cut ``j`` built at ``(x_j, delta_j)`` underestimates the subproblem
cost at a nearby ``(x0, delta)`` by

    g_j = v(x0, delta) - z_j(x0, delta)
        = v(x0, delta) - v_j + mu_j[0]^T dx + sum_k (delta[k] - delta_j[k])^T psi_j[k]

with ``dx = x0 - x_j``.  When ``delta`` differs from ``delta_j`` only by
moving mode transitions (a shift of at most ``s`` steps, then at most ``r``
single-step boundary moves), the cost difference is controlled by local
Lipschitz constants and the dual term by the ``psi`` values in windows of
width ``s + r`` around the transitions of ``delta_j``.

The two window sums only cover deviations that move every transition the
same way.  A sequence with several transitions can move one earlier and
another later, and its dual term then exceeds both sums, so the bound also
takes the exact worst dual term over the enumerated neighborhood.  It is
therefore never smaller than the window form and holds for every member.

Neighborhood rules used throughout:

* shift by ``t`` with ``|t| <= s``: ``delta'[i] = delta[clip(i + t, 0, N - 1)]``
  (the sequence slides left for ``t > 0`` and right for ``t < 0``; the
  vacated end repeats the edge value, so no transition is created);
* stretch: one move takes a transition index ``tau`` (``delta[tau] !=
  delta[tau - 1]``) and copies ``delta[tau]`` into step ``tau - 1``, or
  ``delta[tau - 1]`` into step ``tau``; at most ``r`` moves in total, applied
  to the shifted sequence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from benders_mpc.qp import solve_bsp

log = logging.getLogger(__name__)

NEIGHBORHOOD_CAP = 10_000


class NeighborhoodCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class TemporalDeviation:
    s: int = 0
    r: int = 0
    K: int = 0

    def __post_init__(self):
        for name in ("s", "r", "K"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")


@dataclass(frozen=True)
class LipschitzEntry:
    x0: np.ndarray
    L_x: float
    L_delta: float
    warning: str | None = None

    def __post_init__(self):
        for name in ("L_x", "L_delta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")

    def to_dict(self):
        return {"x0": [float(v) for v in np.asarray(self.x0).reshape(-1)], "L_x": float(self.L_x),
                "L_delta": float(self.L_delta)}


@dataclass(frozen=True, eq=False)
class GapBoundInputs:
    cut: object
    dx0: np.ndarray
    L_x: float
    L_delta: float
    dev: TemporalDeviation
    psi: np.ndarray
    T: tuple
    worst_member: float | None = None


def transitions(delta):
    """Indices ``tau`` in ``1..N-1`` with ``delta[tau] != delta[tau - 1]``."""
    delta = np.asarray(delta)
    if delta.ndim == 1:
        delta = delta[:, None]
    if len(delta) < 2:
        return ()
    return tuple(int(t) + 1 for t in np.flatnonzero(np.any(delta[1:] != delta[:-1], axis=1)))


def gap_inputs(cut, x0, lip, dev):
    """Bundle one stored cut with the data the gap bound needs at ``x0``."""
    L_x, L_delta = (lip.L_x, lip.L_delta) if isinstance(lip, LipschitzEntry) else lip
    return GapBoundInputs(
        cut=cut,
        dx0=np.asarray(x0, dtype=float) - cut.x0_star,
        L_x=float(L_x),
        L_delta=float(L_delta),
        dev=dev,
        psi=np.asarray(cut.psi, dtype=float),
        T=transitions(cut.delta_star),
        worst_member=worst_member_term(cut, dev),
    )


def binary_distance_bound(dev, n_delta):
    """``sqrt((K s + r) n_delta)``, the largest distance a shift/stretch can move a sequence."""
    return math.sqrt((dev.K * dev.s + dev.r) * n_delta)


def window_sums(delta, psi, width):
    """Backward and forward worst-case dual terms for moving every transition by ``width``.

    backward: sum_tau sum_{k = tau - width}^{tau - 1} (delta[tau] - delta[tau - 1])^T psi[k]
    forward:  sum_tau sum_{k = tau}^{tau + width - 1} (delta[tau - 1] - delta[tau])^T psi[k]

    Window indices outside ``[0, N - 1]`` are dropped.
    """
    delta = np.asarray(delta, dtype=float).reshape(psi.shape)
    N = len(psi)
    back = fwd = 0.0
    for tau in transitions(delta):
        jump = delta[tau] - delta[tau - 1]
        back += float(np.sum(psi[max(0, tau - width) : tau] @ jump))
        fwd -= float(np.sum(psi[tau : min(N, tau + width)] @ jump))
    return back, fwd


@lru_cache(maxsize=4096)
def worst_member_term(cut, dev):
    """``max sum_k (delta'[k] - delta_j[k])^T psi_j[k]`` over the cut's neighborhood members."""
    members = np.array(_neighborhood_cached(cut.delta_star.astype(np.int8).tobytes(), cut.delta_star.shape, dev))
    diff = members.astype(float) - cut.delta_star.reshape(1, *cut.psi.shape)
    return float(np.max(np.einsum("mkd,kd->m", diff, cut.psi)))


def dual_gap_bound(inp):
    """Upper bound on the cut gap for sequences in the cut's (s, r) neighborhood.

    ``L_x |dx| + L_delta sqrt((K s + r) n_delta) + mu0^T dx + dual term``, with
    the dual term the larger of the two window sums and the worst neighborhood
    member (see the module notes).
    """
    cut, dev = inp.cut, inp.dev
    n_delta = inp.psi.shape[1] if inp.psi.ndim == 2 else 1
    K = len(inp.T)
    dist = math.sqrt((K * dev.s + dev.r) * n_delta)
    back, fwd = window_sums(cut.delta_star, inp.psi, dev.s + dev.r)
    worst = inp.worst_member if inp.worst_member is not None else worst_member_term(cut, dev)
    dx = np.asarray(inp.dx0, dtype=float)
    return float(
        inp.L_x * np.linalg.norm(dx) + inp.L_delta * dist + cut.mu0 @ dx + max(back, fwd, worst)
    )


def _shift(delta, t):
    N = len(delta)
    return delta[np.clip(np.arange(N) + t, 0, N - 1)]


def _moves(seq):
    for tau in transitions(seq):
        earlier = seq.copy()
        earlier[tau - 1] = seq[tau]
        yield earlier
        later = seq.copy()
        later[tau] = seq[tau - 1]
        yield later


def neighborhood(delta, dev, cap=NEIGHBORHOOD_CAP):
    """All sequences reachable from ``delta`` by one shift then up to ``r`` stretch moves.

    Returned as a lexicographically sorted list of ``(N, n_delta)`` int8 arrays;
    ``delta`` itself is always a member.
    """
    delta = np.asarray(delta, dtype=np.int8)
    if delta.ndim == 1:
        delta = delta[:, None]
    members = _neighborhood_cached(delta.tobytes(), delta.shape, dev, cap)
    return [m.copy() for m in members]


@lru_cache(maxsize=4096)
def _neighborhood_cached(key, shape, dev, cap=NEIGHBORHOOD_CAP):
    delta = np.frombuffer(key, dtype=np.int8).reshape(shape)
    if delta.ndim == 1:
        delta = delta[:, None]
        shape = delta.shape

    def too_many(n):
        if n > cap:
            raise NeighborhoodCapError(
                f"neighborhood with s={dev.s}, r={dev.r} exceeds {cap} sequences; use a smaller (s, r)"
            )

    seen = {}
    for t in range(-dev.s, dev.s + 1):
        m = _shift(delta, t)
        seen.setdefault(m.tobytes(), m)
    frontier = list(seen.values())
    for _ in range(dev.r):
        nxt = []
        for seq in frontier:
            for m in _moves(seq):
                key = m.tobytes()
                if key not in seen:
                    seen[key] = m
                    nxt.append(m)
            too_many(len(seen))
        frontier = nxt
    too_many(len(seen))
    members = sorted(seen.values(), key=lambda m: tuple(m.reshape(-1)))
    return tuple(m.reshape(shape) for m in members)


def alpha_certificate(buffer, miqp, x0, dev, lip, cap=NEIGHBORHOOD_CAP):
    """Worst covered gap: max over the union of cut neighborhoods of the best covering bound.

    Each stored optimality cut covers the sequences in its own neighborhood
    with its gap bound at ``x0``.  Returns ``None`` when no cut is stored.
    """
    best = {}
    for cut in buffer.opt:
        bound = dual_gap_bound(gap_inputs(cut, x0, lip, dev))
        for m in neighborhood(cut.delta_star.astype(np.int8), dev, cap):
            key = m.tobytes()
            if key not in best or bound < best[key]:
                best[key] = bound
    if not best:
        return None
    return max(0.0, max(best.values()))


def tightest_gap_bound(buffer, x0, delta, dev, lip, cap=NEIGHBORHOOD_CAP):
    """Smallest gap bound at ``(x0, delta)`` over the stored cuts whose neighborhood holds ``delta``.

    This is the per-step quantity of an alpha trace: how far the best
    transferred cut can underestimate the cost of the sequence actually
    chosen.  Returns ``None`` when no stored cut covers ``delta``.
    """
    key = np.asarray(delta, dtype=np.int8).tobytes()
    best = None
    for cut in buffer.opt:
        if key in _member_keys(cut.delta_star.astype(np.int8).tobytes(), cut.delta_star.shape, dev, cap):
            bound = max(0.0, dual_gap_bound(gap_inputs(cut, x0, lip, dev)))
            best = bound if best is None else min(best, bound)
    return best


@lru_cache(maxsize=4096)
def _member_keys(key, shape, dev, cap):
    return frozenset(m.tobytes() for m in _neighborhood_cached(key, shape, dev, cap))


def _ratio(num, den):
    return abs(num) / den if den > 0 else 0.0


def lipschitz_at(miqp, x0, delta_star, v_star, next_states, dev):
    """Local ``(L_x, L_delta, warning)`` at one state from the perturbation recipe.

    ``next_states`` are perturbed initial states (noisy one-step simulations);
    the binary perturbations are the (s, r) neighborhood of ``delta_star``.
    """
    L_x = 0.0
    for xp in next_states:
        sol = solve_bsp(miqp, xp, delta_star)
        if sol.feasible:
            L_x = max(L_x, _ratio(sol.v_star - v_star, np.linalg.norm(xp - x0)))
    L_delta, tried, ok = 0.0, 0, 0
    for m in neighborhood(delta_star, dev):
        dist = np.linalg.norm(m.astype(float) - delta_star)
        if dist == 0:
            continue
        tried += 1
        sol = solve_bsp(miqp, x0, m)
        if sol.feasible:
            ok += 1
            L_delta = max(L_delta, _ratio(sol.v_star - v_star, dist))
    warning = None
    if tried and not ok:
        warning = "all perturbed binary sequences infeasible; L_delta set to 0"
        log.warning("%s at x0=%s", warning, np.round(x0, 4))
    return L_x, L_delta, warning


def estimate_lipschitz(miqp, states, oracle, step, noise, perturbations=5, s=2, r=2, rng=None):
    """Lipschitz database over sampled initial states.

    Parameters
    ----------
    miqp : CompactMiqp
    states : iterable of arrays
        Sampled feasible initial states.
    oracle : callable
        ``oracle(miqp, x0) -> (delta_star, v_star)`` or ``None`` when infeasible.
    step : callable
        ``step(x0, u0) -> x1`` nominal one-step simulation.
    noise : callable
        ``noise(rng) -> dx`` additive state disturbance for one step.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dev = TemporalDeviation(s=s, r=r)
    db = []
    for x0 in states:
        x0 = np.asarray(x0, dtype=float)
        res = oracle(miqp, x0)
        if res is None:
            log.info("skipping infeasible sample x0=%s", np.round(x0, 4))
            continue
        delta_star, v_star = res
        sol = solve_bsp(miqp, x0, delta_star)
        u0 = sol.x_star[miqp.input_slice(0)]
        # The perturbed states are noisy one-step successors of x0 under its optimal input.
        x_next = step(x0, u0)
        pert = [x_next + noise(rng) for _ in range(perturbations)]
        L_x, L_delta, warning = lipschitz_at(miqp, x0, delta_star, v_star, pert, dev)
        db.append(LipschitzEntry(x0=x0, L_x=L_x, L_delta=L_delta, warning=warning))
    return db


def lookup_lipschitz(db, x0_query):
    """Nearest stored entry by Euclidean distance; the smallest index wins ties."""
    if len(db) == 0:
        raise ValueError("Lipschitz database is empty")
    X = np.array([np.asarray(e.x0, dtype=float) for e in db])
    dist = np.linalg.norm(X - np.asarray(x0_query, dtype=float), axis=1)
    return db[int(np.argmin(dist))]


def save_lipschitz_db(db, path):
    with open(path, "w") as fh:
        json.dump([e.to_dict() for e in db], fh, indent=1)


def load_lipschitz_db(path):
    with open(path) as fh:
        data = json.load(fh)
    return [LipschitzEntry(x0=np.array(e["x0"], dtype=float), L_x=e["L_x"], L_delta=e["L_delta"]) for e in data]
