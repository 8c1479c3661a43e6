import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from benders_mpc.bounds import dual_gap_bound, gap_inputs, neighborhood
from benders_mpc.cuts import eval_optimality_cut
from benders_mpc.mld import MldSystem, stack_compact
from benders_mpc.models import make_benchmark
from benders_mpc.qp import solve_bsp

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def benchmark_miqp(model_id, N, params=None):
    bm = make_benchmark(model_id, params)
    Q, R, QN = bm.weights
    return bm, stack_compact(bm.sys, N, bm.x_goal, Q, R, QN)


def toy_system():
    """Double integrator with one binary that pushes the velocity and caps the input."""
    E = np.array([[1.0, 0.1], [0.0, 1.0]])
    F = np.array([[0.005], [0.1]])
    G = np.array([[0.0], [0.3]])
    H1 = np.array([[1.0, 0.0], [-1.0, 0.0]])
    H2 = np.array([[0.0], [0.0]])
    H3 = np.array([[-1.0], [1.0]])
    h = np.array([1.5, 1.5])
    return MldSystem(E=E, F=F, G=G, H1=H1, H2=H2, H3=H3, h=h, dt=0.1)


def toy_miqp(N=3):
    sys = toy_system()
    return stack_compact(sys, N, np.zeros(2), np.eye(2), np.eye(1), np.eye(2))


def clear_side_delta(bm, x0, N):
    """Free-flyer codes picking, per obstacle, a side that already holds ``x0``; zeros otherwise."""
    nd = bm.sys.dims.n_delta
    if bm.model_id != "freeflyer":
        return np.zeros((N, nd), dtype=int)
    codes = []
    for (cx, cy), w in bm.params.obstacles:
        a = 0.5 * w
        margins = [x0[0] - cx - a, x0[1] - cy - a, cx - a - x0[0], cy - a - x0[1]]
        codes.append([(0, 0), (0, 1), (1, 0), (1, 1)][int(np.argmax(margins))])
    return np.tile(np.array(codes).reshape(-1), (N, 1))


@pytest.fixture(scope="session")
def cartpole():
    return benchmark_miqp("cartpole", 4)


@pytest.fixture(scope="session")
def humanoid():
    return benchmark_miqp("humanoid", 4)


@pytest.fixture(scope="session")
def toy():
    return toy_miqp(3)


def measured_sandwich(m, cut, rng, dev, n_x0=3, scale=0.02):
    """Exact local Lipschitz maxima over a perturbation set, then the sandwich on that same set.

    ``L_x`` is the largest cost change per unit state move at any fixed member;
    ``L_delta`` the largest change per unit sequence distance at any fixed
    state.  A check needs one of the two triangle paths, through
    ``(x', delta_j)`` or ``(x_j, delta')``, to be feasible.
    """
    members = neighborhood(cut.delta_star.astype(np.int8), dev)
    xs = [cut.x0_star] + [cut.x0_star + rng.normal(scale=scale, size=cut.x0_star.size) for _ in range(n_x0)]
    v = {}
    for i, x in enumerate(xs):
        for j, d in enumerate(members):
            sol = solve_bsp(m, x, d)
            v[i, j] = sol.v_star if sol.feasible else None
    j0 = next(j for j, d in enumerate(members) if np.array_equal(d, cut.delta_star))
    L_x = L_d = 0.0
    for (i, j), val in v.items():
        if val is None:
            continue
        if i > 0 and v[0, j] is not None:
            L_x = max(L_x, abs(val - v[0, j]) / np.linalg.norm(xs[i] - cut.x0_star))
        if j != j0 and v[i, j0] is not None:
            L_d = max(L_d, abs(val - v[i, j0]) / np.linalg.norm(members[j] - cut.delta_star))
    checks = []
    for (i, j), val in v.items():
        if val is None or (v[i, j0] is None and v[0, j] is None):
            continue
        gap = val - eval_optimality_cut(cut, m, xs[i], members[j])
        bound = dual_gap_bound(gap_inputs(cut, xs[i], (L_x, L_d), dev))
        checks.append((gap, bound))
    return checks


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=str):
            terminalreporter.write_line(lines[key])
