"""Closed-loop simulation of the benchmarks under random disturbances.

Disturbance draws are a pure function of ``(seed, step)``: step ``t`` uses a
Philox generator keyed with ``[seed, t]`` and takes ``n_w`` standard normals
(``scale * standard_normal``) or uniforms (``uniform(-scale, scale)``), in
that order, for the benchmark's disturbance channels.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from benders_mpc.bounds import estimate_lipschitz, lookup_lipschitz, tightest_gap_bound
from benders_mpc.cuts import CutBuffer
from benders_mpc.gbd import MpcController, MpcInfeasibleError, gbd_solve
from benders_mpc.mld import stack_compact
from benders_mpc.models import make_benchmark

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeConfig:
    model_id: str = "cartpole"
    N: int = 10
    K_feas: int = 50
    K_opt: int = 40
    G_a: float = 0.1
    steps: int = 300
    seed: int = 0
    disturbance: str | None = None  # gaussian | uniform | none; None picks the benchmark default
    disturbance_scale: float | None = None
    x0_init: tuple | None = None
    I_max: int = 100
    params: object = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.K_feas < 0 or self.K_opt < 0:
            raise ValueError("buffer capacities must be non-negative")
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if self.I_max < 1 or not self.G_a > 0:
            raise ValueError("need I_max >= 1 and G_a > 0")


@dataclass(eq=False)
class EpisodeLog:
    model_id: str
    n_x: int
    n_u: int
    rows: list = field(default_factory=list)
    failed: bool = False
    message: str = ""
    x_final: np.ndarray | None = None

    @property
    def steps(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def columns(self):
        return (
            ["t"]
            + [f"x{i}" for i in range(self.n_x)]
            + [f"u{i}" for i in range(self.n_u)]
            + ["solve_time_us", "iterations", "UB", "LB", "n_feas", "n_opt", "contact_planned", "status", "alpha"]
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self.rows:
                alpha = row.get("alpha")
                w.writerow(
                    [row["t"], *(repr(float(v)) for v in row["x"]), *(repr(float(v)) for v in row["u"]),
                     f"{row['solve_time_us']:.1f}", row["iterations"], repr(row["UB"]), repr(row["LB"]),
                     row["n_feas"], row["n_opt"], int(row["contact_planned"]), row["status"],
                     "" if alpha is None else repr(float(alpha))]
                )


def disturbance_rng(seed, step):
    return np.random.Generator(np.random.Philox(key=np.array([seed, step], dtype=np.uint64)))


def draw_disturbance(kind, scale, n_w, seed, step):
    if kind == "none" or scale == 0:
        return np.zeros(n_w)
    rng = disturbance_rng(seed, step)
    if kind == "gaussian":
        return scale * rng.standard_normal(n_w)
    if kind == "uniform":
        return rng.uniform(-scale, scale, n_w)
    raise ValueError(f"unknown disturbance kind {kind!r}")


def episode_setup(cfg):
    bm = make_benchmark(cfg.model_id, cfg.params)
    Q, R, QN = bm.weights
    miqp = stack_compact(bm.sys, cfg.N, bm.x_goal, Q, R, QN)
    return bm, miqp


def run_episode(cfg, alpha_fn=None):
    """Simulate one closed-loop episode.

    ``alpha_fn(controller, x, metrics)``, if given, is called after each solve
    and its value is logged in the ``alpha`` column.
    """
    bm, miqp = episode_setup(cfg)
    kind = cfg.disturbance or bm.disturbance_kind
    scale = bm.disturbance_scale if cfg.disturbance_scale is None else cfg.disturbance_scale
    n_w = bm.disturbance_map.shape[1]
    ctl = MpcController(miqp, cfg.G_a, cfg.I_max, cfg.K_feas, cfg.K_opt)
    x = np.array(bm.x0_default if cfg.x0_init is None else cfg.x0_init, dtype=float)
    ep = EpisodeLog(cfg.model_id, miqp.dims.n_x, miqp.dims.n_u)
    for t in range(cfg.steps):
        try:
            u, met = ctl.mpc_step(x)
        except MpcInfeasibleError as exc:
            ep.failed, ep.message = True, str(exc)
            log.warning("episode seed %d stopped: %s", cfg.seed, exc)
            break
        row = {
            "t": t,
            "x": x.copy(),
            "u": np.asarray(u, dtype=float).copy(),
            "solve_time_us": met["solve_time_us"],
            "iterations": met["iterations"],
            "UB": met["UB"],
            "LB": met["LB"],
            "n_feas": met["n_feas"],
            "n_opt": met["n_opt"],
            "new_opt": met["new_opt"],
            "status": met["status"],
            "contact_planned": bool(np.any(ctl.last.delta_star)),
        }
        if alpha_fn is not None:
            row["alpha"] = alpha_fn(ctl, x, met)
        ep.rows.append(row)
        w = draw_disturbance(kind, scale, n_w, cfg.seed, t)
        x = bm.plant_step(x, u, w)
    ep.x_final = x
    return ep


def iteration_histogram(logs, cold_start=10, contact_only=False):
    """Counts of GBD iterations over steps ``t >= cold_start`` of every episode."""
    hist = Counter()
    for ep in logs:
        for row in ep.rows:
            if row["t"] < cold_start or (contact_only and not row["contact_planned"]):
                continue
            hist[row["iterations"]] += 1
    return dict(sorted(hist.items()))


def episode_summary(ep, cold_start=10):
    its = [r["iterations"] for r in ep.rows if r["t"] >= cold_start]
    out = {
        "model": ep.model_id,
        "steps": ep.steps,
        "failed": ep.failed,
        "message": ep.message,
        "iter_histogram": {str(k): v for k, v in iteration_histogram([ep], cold_start).items()},
        "median_solve_us": statistics.median(ep.column("solve_time_us")) if ep.rows else math.nan,
        "single_iteration_rate": float(np.mean(np.array(its) == 1)) if its else math.nan,
        "max_n_feas": int(max(ep.column("n_feas"), default=0)),
        "max_n_opt": int(max(ep.column("n_opt"), default=0)),
    }
    if ep.x_final is not None:
        out["x_final"] = [float(v) for v in ep.x_final]
    if ep.model_id == "humanoid" and ep.rows:
        theta = np.abs(np.concatenate([ep.column("x")[:, 0], [ep.x_final[0]]]))
        out["final_abs_theta"] = float(theta[-1])
        out["max_abs_theta"] = float(theta.max())
    return out


def _run_seeded(cfg):
    return run_episode(cfg)


def monte_carlo(cfg, episodes, jobs=1, cold_start=10, contact_only=False):
    """Run ``episodes`` episodes with seeds ``cfg.seed, cfg.seed + 1, ...``.

    Returns ``(logs, summary)``; a failed episode is recorded and counted
    against the success rate.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    cfgs = [replace(cfg, seed=cfg.seed + e) for e in range(episodes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(_run_seeded, cfgs))
    else:
        logs = [run_episode(c) for c in cfgs]
    hist = iteration_histogram(logs, cold_start, contact_only)
    times = [r["solve_time_us"] for ep in logs for r in ep.rows]
    summary = {
        "episodes": episodes,
        "success_rate": sum(not ep.failed for ep in logs) / episodes,
        "iter_histogram": {str(k): v for k, v in hist.items()},
        "median_solve_us": statistics.median(times) if times else math.nan,
        "cold_start_steps": cold_start,
    }
    return logs, summary


def sample_states(bm, n, rng):
    """Initial states for Lipschitz estimation.

    Cart-pole samples put the pole tip near one of the walls; the humanoid
    samples lean angles on both sides of the contact threshold; free-flyer
    samples cover the workspace below the target.
    """
    out = []
    for _ in range(n):
        if bm.model_id == "cartpole":
            p = bm.params
            side = 1.0 if rng.random() < 0.5 else -1.0
            wall = p.d1 if side > 0 else p.d2
            x2 = rng.uniform(-0.3, 0.3)
            tip = side * (wall + rng.uniform(-0.15, 0.05))
            out.append(np.array([tip - p.l * x2, x2, side * rng.uniform(-1, 1), side * rng.uniform(-2, 2)]))
        elif bm.model_id == "humanoid":
            out.append(np.array([rng.uniform(-0.6, 0.6), rng.uniform(-2.0, 2.0)]))
        else:
            goal = bm.x_goal
            out.append(np.array([rng.uniform(-2.0, 2.0), rng.uniform(0.0, goal[1]), 0.0, 0.0]))
    return out


def exact_oracle(miqp, x0, I_max=500):
    """Near-exact MIQP solve by cold-started GBD at a tight gap."""
    res = gbd_solve(miqp, x0, CutBuffer(0, 0, x0), G_a=1e-6, I_max=I_max)
    if res.delta_star is None:
        return None
    return res.delta_star, res.UB


class WarmOracle:
    """MIQP solves that share one unbounded cut buffer across calls.

    Cuts stay valid lower bounds at every ``x0``, so each solve starts from
    everything learned so far; at a tight gap this is far cheaper than
    cold starts when many nearby states are solved in a row.
    """

    def __init__(self, G_a=1e-2, I_max=200):
        self.G_a = G_a
        self.I_max = I_max
        self.buffer = CutBuffer(10**9, 10**9)

    def __call__(self, miqp, x0):
        self.buffer.transfer(x0)
        res = gbd_solve(miqp, x0, self.buffer, G_a=self.G_a, I_max=self.I_max)
        self.buffer.store(res.new_feas_cuts, res.new_opt_cuts)
        if res.delta_star is None:
            return None
        return res.delta_star, res.UB


def build_lipschitz_db(cfg, samples, perturbations=5, s=2, r=2, seed=0, oracle=None):
    """Lipschitz database for the benchmark of ``cfg`` from ``samples`` random states.

    ``oracle`` defaults to a :class:`WarmOracle`.
    """
    bm, miqp = episode_setup(cfg)
    oracle = oracle if oracle is not None else WarmOracle()
    rng = np.random.default_rng(seed)
    states = sample_states(bm, samples, rng)
    n_w = bm.disturbance_map.shape[1]
    scale = bm.disturbance_scale if cfg.disturbance_scale is None else cfg.disturbance_scale
    kind = cfg.disturbance or bm.disturbance_kind

    def step(x, u):
        return bm.plant_step(x, u, np.zeros(n_w))

    def noise(g):
        w = scale * g.standard_normal(n_w) if kind == "gaussian" else g.uniform(-scale, scale, n_w)
        return bm.disturbance_map @ w

    return estimate_lipschitz(miqp, states, oracle, step, noise, perturbations, s, r, rng)


ALPHA_TRACE_COLUMNS = ("t", "alpha", "v_star", "n_opt_cuts")


def alpha_trace(cfg, db, dev):
    """Closed-loop run logging the tightest stored-cut gap bound at each chosen sequence.

    Returns ``(episode_log, rows)`` with rows ``(t, alpha, v_star, n_opt_cuts)``;
    ``alpha`` is NaN when no stored cut covers the chosen sequence.
    """

    def alpha_fn(ctl, x, met):
        lip = lookup_lipschitz(db, x)
        val = tightest_gap_bound(ctl.buffer, x, ctl.last.delta_star, dev, lip)
        return math.nan if val is None else val

    ep = run_episode(cfg, alpha_fn)
    rows = [(r["t"], r["alpha"], r["UB"], r["n_opt"]) for r in ep.rows]
    return ep, rows


def write_alpha_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ALPHA_TRACE_COLUMNS)
        for t, a, v, n in rows:
            w.writerow([t, repr(float(a)), repr(float(v)), n])
