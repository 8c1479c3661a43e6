import numpy as np
import pytest

from benders_mpc.cuts import CutBuffer
from benders_mpc.gbd import gbd_solve
from benders_mpc.mld import MldSystem, stack_compact
from benders_mpc.models import FreeFlyerParams
from benders_mpc.oracle import OracleCapError, bnb_miqp, enumerate_miqp
from benders_mpc.qp import solve_bsp
from benders_mpc.verify import random_instance
from conftest import benchmark_miqp, toy_miqp


def contradictory(N=2):
    sys = MldSystem(E=[[1.0]], F=[[1.0]], G=[[0.0]], H1=[[0.0], [0.0]], H2=[[1.0], [-1.0]], H3=[[0.0], [0.0]],
                    h=[-1.0, -2.0])
    return stack_compact(sys, N, [0.0], [[1.0]], [[1.0]], [[1.0]])


def test_no_binaries_single_solve():
    _, m = benchmark_miqp("freeflyer", 4, FreeFlyerParams(obstacles=[]))
    x0 = np.array([0.2, 0.1, 0.0, 0.0])
    e, b = enumerate_miqp(m, x0), bnb_miqp(m, x0)
    assert e.n_nodes == 1 and b.n_nodes == 1
    assert e.v_opt == b.v_opt == solve_bsp(m, x0, np.zeros((4, 0))).v_star


def test_infeasible_everywhere():
    m = contradictory()
    assert enumerate_miqp(m, np.zeros(1)).status == "infeasible"
    res = bnb_miqp(m, np.zeros(1))
    assert res.status == "infeasible" and res.delta_opt is None


def test_enumeration_cap():
    _, m = benchmark_miqp("cartpole", 11)
    with pytest.raises(OracleCapError):
        enumerate_miqp(m, np.zeros(4))


def test_humanoid_cross_check_with_gbd():
    _, m = benchmark_miqp("humanoid", 3)
    x0 = np.array([0.2, 0.0])
    opt = enumerate_miqp(m, x0)
    res = gbd_solve(m, x0, CutBuffer(0, 0), G_a=0.1)
    assert res.UB >= opt.v_opt - 1e-9
    assert res.UB - opt.v_opt <= 0.1 * res.UB


def test_integral_root_needs_no_branching():
    # The binary pushes the velocity further from zero, so its relaxation sits at 0.
    m = toy_miqp(3)
    res = bnb_miqp(m, np.array([0.5, 1.0]))
    assert res.status == "optimal"
    assert res.n_nodes == 2  # root relaxation plus the exact solve at its rounded point
    np.testing.assert_array_equal(res.delta_opt, np.zeros((3, 1)))


def test_oracles_agree_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        inst = random_instance(rng, 6)
        e = enumerate_miqp(inst.miqp, inst.x0)
        b = bnb_miqp(inst.miqp, inst.x0)
        assert e.status == b.status
        if e.status == "optimal":
            assert abs(b.v_opt - e.v_opt) <= 1e-6 * max(1.0, abs(e.v_opt))
            sol = solve_bsp(inst.miqp, inst.x0, b.delta_opt)
            assert sol.feasible and sol.v_star == pytest.approx(b.v_opt, rel=1e-9)
