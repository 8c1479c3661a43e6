import math

import numpy as np
import pytest

from benders_mpc.cuts import CutBuffer, FeasibilityCut, make_optimality_cut
from benders_mpc.gbd import METRICS_COLUMNS, MpcController, MpcInfeasibleError, gbd_solve, metrics_row, relative_gap
from benders_mpc.mld import MldSystem, stack_compact
from benders_mpc.models import FreeFlyerParams
from benders_mpc.oracle import enumerate_miqp
from benders_mpc.qp import solve_bsp
from benders_mpc.sim import sample_states
from conftest import benchmark_miqp, toy_miqp


def test_relative_gap_conventions():
    assert relative_gap(math.inf, 0.0) == math.inf
    assert relative_gap(0.0, -0.5) == 0.5
    assert relative_gap(10.0, 9.0) == pytest.approx(0.1)


def test_argument_validation():
    m = toy_miqp(2)
    with pytest.raises(ValueError):
        gbd_solve(m, np.zeros(2), CutBuffer(0, 0), G_a=0.0)
    with pytest.raises(ValueError):
        gbd_solve(m, np.zeros(2), CutBuffer(0, 0), I_max=0)


def test_tight_cut_at_optimum_converges_at_once():
    m = toy_miqp(3)
    x0 = np.array([1.2, 0.4])
    opt = enumerate_miqp(m, x0)
    sol = solve_bsp(m, x0, opt.delta_opt)
    buf = CutBuffer(10, 10, x0)
    buf.store([], [make_optimality_cut(m, x0, opt.delta_opt, sol)])
    res = gbd_solve(m, x0, buf, G_a=1e-6)
    assert res.iterations == 1 and res.status == "converged"
    assert res.UB == pytest.approx(opt.v_opt, rel=1e-9)
    assert res.LB == pytest.approx(opt.v_opt, rel=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_tiny_instance_matches_enumeration(seed):
    m = toy_miqp(3)
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1.4, 1.4, size=2)
    opt = enumerate_miqp(m, x0)
    res = gbd_solve(m, x0, CutBuffer(0, 0), G_a=0.1)
    assert res.UB >= opt.v_opt - 1e-9
    assert res.UB - opt.v_opt <= 0.1 * abs(res.UB) + 1e-12


def test_cartpole_nominal_start_converges():
    bm, m = benchmark_miqp("cartpole", 10)
    res = gbd_solve(m, bm.x0_default, CutBuffer(0, 0), G_a=0.1)
    assert res.status == "converged"
    assert relative_gap(res.UB, res.LB) < 0.1
    assert res.u_star.shape == (3,)


@pytest.mark.parametrize("model", ["cartpole", "humanoid", "freeflyer"])
def test_lower_bounds_increase_and_infeasible_sequences_never_return(model):
    bm, m = benchmark_miqp(model, 4)
    rng = np.random.default_rng(8)
    for x0 in sample_states(bm, 6, rng):
        res = gbd_solve(m, x0, CutBuffer(0, 0), G_a=1e-6, I_max=300)
        hist = res.lb_history
        assert all(b >= a - 1e-7 * max(1.0, abs(a)) for a, b in zip(hist, hist[1:]))
        origins = [c.origin_delta.tobytes() for c in res.new_feas_cuts]
        assert len(set(origins)) == len(origins)
        feasible = {c.delta_star.astype(float).tobytes() for c in res.new_opt_cuts}
        assert not feasible & set(origins)
        if res.u_star is not None:
            assert res.UB == pytest.approx(solve_bsp(m, x0, res.delta_star).v_star, rel=1e-12)
            assert res.UB == min(c.v_star for c in res.new_opt_cuts)


def test_no_binaries_is_one_qp():
    bm, m = benchmark_miqp("freeflyer", 5, FreeFlyerParams(obstacles=[]))
    assert m.dims.n_delta == 0
    res = gbd_solve(m, np.array([0.0, 0.0, 0.0, 0.0]), CutBuffer(0, 0), G_a=1e-9)
    assert res.iterations == 1 and res.status == "converged"
    assert res.UB == res.LB


def test_stale_feasibility_cut_triggers_one_retry():
    m = toy_miqp(3)
    x0 = np.array([0.5, 0.0])
    blocker = FeasibilityCut(mu_f=np.zeros(m.A.shape[0]), pi_f=np.zeros(m.C.shape[0]), origin_x0=x0,
                             origin_delta=np.zeros((3, 1)), psi=np.zeros((3, 1)), mu0=np.zeros(2), h_term=-1.0)
    buf = CutBuffer(5, 5, x0)
    buf.store([blocker], [])
    res = gbd_solve(m, x0, buf, G_a=0.1)
    assert res.status == "converged" and res.u_star is not None
    assert list(buf.feas) == [blocker]


def test_genuine_infeasibility_raises_from_controller():
    sys = MldSystem(E=[[1.0]], F=[[1.0]], G=[[0.0]], H1=[[0.0], [0.0]], H2=[[1.0], [-1.0]], H3=[[0.0], [0.0]],
                    h=[-1.0, -2.0])
    m = stack_compact(sys, 2, [0.0], [[1.0]], [[1.0]], [[1.0]])
    res = gbd_solve(m, np.zeros(1), CutBuffer(0, 0))
    assert res.status == "infeasible" and res.u_star is None
    ctl = MpcController(m, K_feas=10, K_opt=10)
    with pytest.raises(MpcInfeasibleError) as info:
        ctl.mpc_step(np.zeros(1))
    assert info.value.result is not None


def test_controller_repeats_in_one_iteration_and_respects_capacity():
    bm, m = benchmark_miqp("cartpole", 6)
    x0 = bm.x0_default
    ctl = MpcController(m, G_a=0.1, K_feas=50, K_opt=40)
    ctl.mpc_step(x0)
    _, second = ctl.mpc_step(x0)
    assert second["iterations"] == 1
    row = metrics_row(second)
    assert len(row) == len(METRICS_COLUMNS)
    assert all(np.isfinite(v) for v in row)
    ctl = MpcController(m, G_a=0.1, K_feas=3, K_opt=2)
    u, met = ctl.mpc_step(x0)
    assert met["n_feas"] <= 3 and met["n_opt"] <= 2
    x = x0
    for _ in range(10):
        x = bm.plant_step(x, u, np.zeros(1))
        u, met = ctl.mpc_step(x)
        assert met["n_feas"] <= 3 and met["n_opt"] <= 2
        assert met["UB"] >= met["LB"] - 1e-8
