"""Randomized cross-checks of GBD against the exact oracles."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from benders_mpc.cuts import CutBuffer, eval_feasibility_cut, eval_optimality_cut
from benders_mpc.gbd import gbd_solve
from benders_mpc.mld import stack_compact
from benders_mpc.models import FreeFlyerParams, make_benchmark
from benders_mpc.oracle import bnb_miqp, enumerate_miqp
from benders_mpc.qp import solve_bsp
from benders_mpc.sim import sample_states

VERIFY_MODELS = ("cartpole", "humanoid", "freeflyer")


@dataclasses.dataclass(frozen=True, eq=False)
class Instance:
    model: str
    N: int
    miqp: object
    x0: np.ndarray


def random_instance(rng, max_bits, model=None, N=None):
    """Random small MIQP with ``N * n_delta <= max_bits`` from one benchmark.

    ``N`` fixes the horizon instead of drawing it; it is clipped to the bit budget.
    """
    model = model or VERIFY_MODELS[int(rng.integers(len(VERIFY_MODELS)))]
    params = None
    if model == "freeflyer":
        # One or two obstacles keep n_delta small enough for enumeration.
        n_obs = int(rng.integers(1, 3)) if max_bits >= 4 else 1
        obstacles = [[[float(rng.uniform(-1.5, 1.5)), float(rng.uniform(1.0, 4.0))], 0.7] for _ in range(n_obs)]
        params = FreeFlyerParams(obstacles=obstacles)
    bm = make_benchmark(model, params)
    n_delta = bm.sys.dims.n_delta
    top = max(1, max_bits // n_delta)
    N = min(int(N), top) if N is not None else int(rng.integers(1, top + 1))
    Q, R, QN = bm.weights
    miqp = stack_compact(bm.sys, N, bm.x_goal, Q, R, QN)
    x0 = sample_states(bm, 1, rng)[0]
    return Instance(model, N, miqp, x0)


def flip_cut(cut):
    """Negate a cut's dual payload while keeping its constant: a deliberately broken cut."""
    return dataclasses.replace(cut, mu=-cut.mu, pi=-cut.pi, psi=-cut.psi, mu0=-cut.mu0, h_term=-cut.h_term)


def _rel(a, b):
    if math.isinf(a) or math.isinf(b):
        return 0.0 if a == b else math.inf
    return abs(a - b) / max(abs(b), 1e-9)


def check_instance(inst, rng, inject_fault=False, tol=1e-6):
    """Run every check on one instance; returns ``{check: (passed, detail)}``."""
    m, x0 = inst.miqp, inst.x0
    out = {}
    enum = enumerate_miqp(m, x0)
    bnb = bnb_miqp(m, x0)
    out["oracle_agreement"] = (enum.status == bnb.status and _rel(bnb.v_opt, enum.v_opt) <= tol,
                               {"enum": enum.v_opt, "bnb": bnb.v_opt})

    loose = gbd_solve(m, x0, CutBuffer(0, 0, x0), G_a=0.1)
    tight = gbd_solve(m, x0, CutBuffer(0, 0, x0), G_a=1e-6, I_max=1000)
    if enum.status == "infeasible":
        out["gbd_ga_0.1"] = (loose.u_star is None, {"UB": loose.UB})
        out["gbd_ga_1e-6"] = (tight.u_star is None, {"UB": tight.UB})
    else:
        ok = loose.u_star is not None and loose.UB >= enum.v_opt - tol * max(1.0, abs(enum.v_opt)) and (
            loose.UB - enum.v_opt <= 0.1 * abs(loose.UB) + 1e-9
        )
        out["gbd_ga_0.1"] = (ok, {"UB": loose.UB, "v_opt": enum.v_opt})
        out["gbd_ga_1e-6"] = (tight.u_star is not None and _rel(tight.UB, enum.v_opt) <= 1e-5,
                              {"UB": tight.UB, "v_opt": enum.v_opt})

    # Cuts generated at x0 must be tight there and stay valid lower bounds after transfer.
    opt_cuts = [flip_cut(c) for c in tight.new_opt_cuts] if inject_fault else list(tight.new_opt_cuts)
    ok, worst = True, 0.0
    shape = (m.N, m.dims.n_delta)
    for cut in opt_cuts:
        tight_err = abs(eval_optimality_cut(cut, m, cut.x0_star, cut.delta_star) - cut.v_star)
        worst = max(worst, tight_err / max(1.0, abs(cut.v_star)))
        ok &= tight_err <= tol * max(1.0, abs(cut.v_star))
        for _ in range(3):
            xp = x0 + 0.05 * rng.standard_normal(x0.size)
            delta = rng.integers(0, 2, size=shape)
            sol = solve_bsp(m, xp, delta)
            if sol.feasible:
                excess = eval_optimality_cut(cut, m, xp, delta) - sol.v_star
                worst = max(worst, excess / max(1.0, abs(sol.v_star)))
                ok &= excess <= tol * max(1.0, abs(sol.v_star))
    for cut in tight.new_feas_cuts:
        val = eval_feasibility_cut(cut, m, cut.origin_x0, cut.origin_delta)
        ok &= val < 0
    out["cut_validity"] = (bool(ok), {"worst_excess": worst, "n_opt": len(opt_cuts), "n_feas": len(tight.new_feas_cuts)})
    return out


def run_verify(instances, max_bits, seed, inject_fault=False):
    """Per-check JSON-ready records for ``instances`` random instances."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(instances):
        inst = random_instance(rng, max_bits, VERIFY_MODELS[i % len(VERIFY_MODELS)])
        for name, (passed, detail) in check_instance(inst, rng, inject_fault).items():
            records.append({"instance": i, "model": inst.model, "N": inst.N, "check": name, "pass": bool(passed),
                            "detail": {k: float(v) for k, v in detail.items()}})
    return records
