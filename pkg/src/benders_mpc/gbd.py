"""Generalized Benders Decomposition loop and the warm-started MPC controller."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from benders_mpc.cuts import CutBuffer, make_feasibility_cut, make_optimality_cut
from benders_mpc.master import solve_bmp
from benders_mpc.qp import solve_bsp

log = logging.getLogger(__name__)

DEFAULT_I_MAX = 100


class MpcInfeasibleError(RuntimeError):
    """No binary sequence admits a feasible subproblem at this initial state."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(eq=False)
class GbdResult:
    u_star: np.ndarray | None
    x_traj: np.ndarray | None
    UB: float
    LB: float
    iterations: int
    new_feas_cuts: list
    new_opt_cuts: list
    status: str  # converged | iteration_cap | infeasible
    delta_star: np.ndarray | None = None
    lb_history: list = field(default_factory=list)
    first_delta: np.ndarray | None = None
    first_feasible: bool = False
    first_cost: float = math.inf


def relative_gap(UB, LB):
    """``|UB - LB| / |UB|``; the absolute gap when ``UB == 0``."""
    if not math.isfinite(UB):
        return math.inf
    if UB == 0.0:
        return abs(UB - LB)
    return abs(UB - LB) / abs(UB)


def gbd_solve(miqp, x0, buffer, G_a=0.1, I_max=DEFAULT_I_MAX):
    """Run GBD at ``x0`` seeded with the cuts in ``buffer`` (evaluated at ``x0``).

    The buffer is not modified; cuts generated here are returned in
    ``new_feas_cuts``/``new_opt_cuts`` for the caller to store.
    """
    if not G_a > 0:
        raise ValueError("G_a must be positive")
    if I_max < 1:
        raise ValueError("I_max must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    seed = buffer
    retried = False
    UB, LB = math.inf, -math.inf
    new_feas, new_opt = [], []
    best_x = best_delta = None
    lb_hist = []
    res = GbdResult(None, None, UB, LB, 0, new_feas, new_opt, "iteration_cap", lb_history=lb_hist)
    i = 0
    while i < I_max:
        bmp = solve_bmp(seed, miqp, x0, new_feas, new_opt)
        if bmp.status == "infeasible" and not retried and seed.feas:
            # Stale transferred feasibility cuts: retry once without them.
            log.info("master infeasible with %d transferred feasibility cuts; retrying", len(seed.feas))
            retried = True
            seed = CutBuffer(0, seed.K_opt, x0)
            seed.opt.extend(buffer.opt)
            continue
        if bmp.delta_star is None:
            res.status = "infeasible"
            break
        delta = bmp.delta_star
        LB = bmp.z0_star
        sol = solve_bsp(miqp, x0, delta)
        if sol.feasible:
            new_opt.append(make_optimality_cut(miqp, x0, delta, sol))
            if miqp.dims.n_delta == 0:
                LB = sol.v_star  # nothing left to branch on: the subproblem is the problem
            if sol.v_star < UB:
                UB = sol.v_star
                best_x, best_delta = sol.x_star, delta
        else:
            new_feas.append(make_feasibility_cut(miqp, x0, delta, sol))
        if i == 0:
            res.first_delta = delta
            res.first_feasible = sol.feasible
            res.first_cost = sol.v_star if sol.feasible else math.inf
        lb_hist.append(LB)
        i += 1
        if relative_gap(UB, LB) < G_a:
            res.status = "converged"
            break
        if bmp.status == "iteration_cap":
            log.warning("master node cap reached; bound may be loose")
    res.UB, res.LB, res.iterations = UB, LB, i
    if best_x is not None:
        res.x_traj = best_x
        res.u_star = best_x[miqp.input_slice(0)].copy()
        res.delta_star = best_delta
    elif res.status != "infeasible" and i >= I_max:
        res.status = "iteration_cap"
    return res


class MpcController:
    """Receding-horizon controller that carries a FIFO cut buffer across steps."""

    def __init__(self, miqp, G_a=0.1, I_max=DEFAULT_I_MAX, K_feas=50, K_opt=40):
        self.miqp = miqp
        self.G_a = G_a
        self.I_max = I_max
        self.buffer = CutBuffer(K_feas, K_opt)
        self.t = 0
        self.last = None

    def mpc_step(self, x0):
        """Solve at ``x0``, store new cuts and return ``(u_star, metrics)``."""
        self.buffer.transfer(x0)
        t0 = time.perf_counter()
        res = gbd_solve(self.miqp, x0, self.buffer, self.G_a, self.I_max)
        elapsed = time.perf_counter() - t0
        self.last = res
        if res.u_star is None:
            raise MpcInfeasibleError(
                f"no feasible control at step {self.t} (status {res.status}, "
                f"{len(res.new_feas_cuts)} feasibility cuts generated)",
                res,
            )
        self.buffer.store(res.new_feas_cuts, res.new_opt_cuts)
        metrics = {
            "t": self.t,
            "solve_time_us": elapsed * 1e6,
            "iterations": res.iterations,
            "n_feas": len(self.buffer.feas),
            "n_opt": len(self.buffer.opt),
            "UB": res.UB,
            "LB": res.LB,
            "status": res.status,
            "new_opt": len(res.new_opt_cuts),
        }
        self.t += 1
        return res.u_star, metrics


METRICS_COLUMNS = ("t", "solve_time_us", "gbd_iterations", "cost_UB", "cost_LB", "n_feas_cuts", "n_opt_cuts")


def metrics_row(metrics):
    return [
        metrics["t"],
        metrics["solve_time_us"],
        metrics["iterations"],
        metrics["UB"],
        metrics["LB"],
        metrics["n_feas"],
        metrics["n_opt"],
    ]
