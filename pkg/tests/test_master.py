import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from benders_mpc.cuts import CutBuffer, eval_feasibility_cut, eval_optimality_cut
from benders_mpc.gbd import gbd_solve
from benders_mpc.master import Z_FLOOR, relax_lp, solve_bmp
from benders_mpc.sim import sample_states
from conftest import benchmark_miqp


def brute_force(buffer, m, x0):
    """Best (value, delta) over all binaries by direct cut evaluation, lexicographic ties."""
    N, nd = m.N, m.dims.n_delta
    best = (np.inf, None)
    for bits in itertools.product((0, 1), repeat=N * nd):
        d = np.array(bits).reshape(N, nd)
        if any(eval_feasibility_cut(c, m, x0, d) < -1e-8 for c in buffer.feas):
            continue
        z = max([Z_FLOOR] + [eval_optimality_cut(c, m, x0, d) for c in buffer.opt])
        if best[1] is None or z < best[0] - 1e-9 * max(1.0, abs(best[0])):
            best = (z, d)
    return best


def cut_pool(model, N, seed, iters=8):
    """Cuts gathered from a few loose GBD solves at random states."""
    bm, m = benchmark_miqp(model, N)
    rng = np.random.default_rng(seed)
    buf = CutBuffer(1000, 1000)
    for x0 in sample_states(bm, 3, rng):
        res = gbd_solve(m, x0, buf, G_a=0.5, I_max=iters)
        buf.store(res.new_feas_cuts, res.new_opt_cuts)
    return bm, m, buf, rng


def test_empty_buffer_floor_and_zeros():
    _, m = benchmark_miqp("cartpole", 3)
    sol = solve_bmp(CutBuffer(0, 0), m, np.zeros(4))
    assert sol.status == "optimal" and sol.z0_star == Z_FLOOR
    np.testing.assert_array_equal(sol.delta_star, np.zeros((3, 2)))


@pytest.mark.parametrize("model,N", [("cartpole", 3), ("humanoid", 4), ("freeflyer", 2)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_exhaustive_enumeration(model, N, seed):
    bm, m, buf, rng = cut_pool(model, N, seed)
    for x0 in sample_states(bm, 3, rng):
        sol = solve_bmp(buf, m, x0)
        z, d = brute_force(buf, m, x0)
        if d is None:
            assert sol.status == "infeasible"
            continue
        assert sol.status == "optimal"
        assert sol.z0_star == pytest.approx(z, rel=1e-7, abs=1e-7)
        np.testing.assert_array_equal(sol.delta_star, d)
        # The reported bound is the cut envelope at the returned sequence.
        env = max([Z_FLOOR] + [eval_optimality_cut(c, m, x0, sol.delta_star) for c in buf.opt])
        assert sol.z0_star == pytest.approx(env, rel=1e-9, abs=1e-9)
        assert all(eval_feasibility_cut(c, m, x0, sol.delta_star) >= -1e-8 for c in buf.feas)


def test_feasibility_cut_excludes_its_origin():
    bm, m = benchmark_miqp("cartpole", 3)
    rng = np.random.default_rng(3)
    res = None
    for x0 in sample_states(bm, 20, rng):
        res = gbd_solve(m, x0, CutBuffer(0, 0), G_a=0.1)
        if res.new_feas_cuts:
            break
    assert res.new_feas_cuts
    cut = res.new_feas_cuts[0]
    buf = CutBuffer(5, 0)
    buf.store([cut], [])
    sol = solve_bmp(buf, m, cut.origin_x0)
    assert eval_feasibility_cut(cut, m, cut.origin_x0, cut.origin_delta) < 0
    assert not np.array_equal(sol.delta_star, cut.origin_delta)


def test_relaxation_bounds():
    bm, m, buf, rng = cut_pool("humanoid", 4, 4)
    x0 = sample_states(bm, 1, rng)[0]
    n = m.n_binary
    z_root, frac = relax_lp(buf, m, x0)
    sol = solve_bmp(buf, m, x0)
    assert z_root <= sol.z0_star + 1e-9
    assert frac.shape == (4, 2) and np.all((frac >= -1e-12) & (frac <= 1 + 1e-12))
    assert relax_lp(CutBuffer(0, 0), m, x0)[0] == Z_FLOOR
    for bits in [(0,) * n, (1,) * n, tuple(rng.integers(0, 2, n))]:
        fixed = dict(enumerate(bits))
        d = np.array(bits).reshape(4, 2)
        exact = max([Z_FLOOR] + [eval_optimality_cut(c, m, x0, d) for c in buf.opt])
        feasible = all(eval_feasibility_cut(c, m, x0, d) >= -1e-8 for c in buf.feas)
        out = relax_lp(buf, m, x0, fixed)
        if feasible:
            assert out[0] == pytest.approx(exact, rel=1e-7, abs=1e-7)
    with pytest.raises(ValueError):
        relax_lp(buf, m, x0, {0: 2})


@settings(max_examples=15)
@given(st.integers(0, 1000))
def test_adding_cuts_is_monotone(seed):
    bm, m, buf, rng = cut_pool("humanoid", 3, seed, iters=4)
    x0 = sample_states(bm, 1, rng)[0]
    opt, feas = list(buf.opt), list(buf.feas)
    prev = None
    fewer = CutBuffer(1000, 1000)
    for c in opt:
        fewer.store([], [c])
        z = solve_bmp(fewer, m, x0).z0_star
        if prev is not None:
            assert z >= prev - 1e-9 * max(1.0, abs(prev))
        prev = z

    def feasible_set(b):
        return {bits for bits in itertools.product((0, 1), repeat=6)
                if all(eval_feasibility_cut(c, m, x0, np.array(bits).reshape(3, 2)) >= -1e-8 for c in b.feas)}

    grow = CutBuffer(1000, 0)
    last = feasible_set(grow)
    for c in feas:
        grow.store([c], [])
        now = feasible_set(grow)
        assert now <= last
        last = now


def test_lexicographic_tie_break_among_optima():
    # With only the floor binding, every sequence ties and the smallest wins.
    bm, m, buf, rng = cut_pool("humanoid", 3, 9)
    weak = CutBuffer(0, 1000)
    weak.store([], list(buf.opt))
    x0 = np.array([0.0, 0.0])
    sol = solve_bmp(weak, m, x0)
    z, d = brute_force(weak, m, x0)
    np.testing.assert_array_equal(sol.delta_star, d)


def test_node_cap_reports_incumbent():
    bm, m, buf, rng = cut_pool("cartpole", 4, 10)
    x0 = sample_states(bm, 1, rng)[0]
    sol = solve_bmp(buf, m, x0, node_cap=1)
    assert sol.status in ("iteration_cap", "optimal", "infeasible")
    if sol.status == "iteration_cap":
        assert sol.delta_star is not None or sol.z0_star == np.inf


def test_relaxation_fallback_matches_simplex(monkeypatch):
    bm, m, buf, rng = cut_pool("humanoid", 4, 12)
    x0 = sample_states(bm, 1, rng)[0]
    expected = solve_bmp(buf, m, x0)

    from benders_mpc import simplex

    def broken(self, lb=None, ub=None, warm=None):
        raise simplex.LpSolverError("lost dual feasibility")

    monkeypatch.setattr(simplex.DualSimplex, "solve", broken)
    got = solve_bmp(buf, m, x0)
    assert got.status == expected.status
    assert got.z0_star == pytest.approx(expected.z0_star, rel=1e-7, abs=1e-7)
