import numpy as np
import pytest
from hypothesis import given, strategies as st

from benders_mpc.mld import (
    DimensionError,
    MldSystem,
    binary_sequence,
    discretize_zoh,
    dual_delta_coefficients,
    expm,
    rhs_b,
    rhs_d,
    simulate_nominal,
    stack_compact,
)
from benders_mpc.models import build_cartpole, build_humanoid
from conftest import benchmark_miqp, toy_miqp, toy_system


def scalar_system(n_c=0):
    return MldSystem(E=[[1.0]], F=[[1.0]], G=np.zeros((1, 0)), H1=np.zeros((n_c, 1)), H2=np.zeros((n_c, 1)),
                     H3=np.zeros((n_c, 0)), h=np.zeros(n_c))


def test_scalar_block_structure():
    m = stack_compact(scalar_system(), 1, [0.0], [[1.0]], [[1.0]], [[1.0]])
    assert m.A.shape == (2, 3)
    np.testing.assert_array_equal(m.A, [[1, 0, 0], [-1, -1, 1]])


def test_humanoid_gravity_entry():
    assert build_humanoid().E[1, 0] == pytest.approx(25 * 9.81 * 0.4 * 0.02 / 0.8, abs=1e-12)
    assert build_humanoid().E[1, 0] == pytest.approx(2.4525, abs=1e-12)


def test_cartpole_stacked_shapes():
    _, m = benchmark_miqp("cartpole", 10)
    n_var = 10 * (4 + 3) + 4
    assert n_var == 74
    assert m.A.shape == (44, n_var)
    assert m.C.shape == (200, n_var)
    assert m.Q.shape == (n_var, n_var)


def test_dimension_errors():
    sys = build_cartpole()
    with pytest.raises(DimensionError):
        stack_compact(sys, 2, np.zeros(4), np.eye(3), np.eye(3), np.eye(4))
    with pytest.raises(DimensionError):
        stack_compact(sys, 2, np.zeros((2, 4)), np.eye(4), np.eye(3), np.eye(4))
    with pytest.raises(ValueError):
        stack_compact(sys, 0, np.zeros(4), np.eye(4), np.eye(3), np.eye(4))
    with pytest.raises(ValueError):
        stack_compact(sys, 2, np.zeros(4), -np.eye(4), np.eye(3), np.eye(4))
    with pytest.raises(DimensionError):
        MldSystem(E=np.eye(2), F=np.ones((3, 1)), G=np.zeros((2, 0)), H1=np.zeros((0, 2)), H2=np.zeros((0, 1)),
                  H3=np.zeros((0, 0)), h=np.zeros(0))


def test_per_step_reference_and_weights():
    sys = toy_system()
    xg = np.arange(8, dtype=float).reshape(4, 2)
    m = stack_compact(sys, 3, xg, [np.eye(2) * (k + 1) for k in range(3)], np.eye(1), 5 * np.eye(2))
    np.testing.assert_array_equal(m.states(m.x_g), xg)
    assert m.Q[m.state_slice(2), m.state_slice(2)][0, 0] == 3.0
    assert m.Q[m.state_slice(3), m.state_slice(3)][0, 0] == 5.0


def test_rhs_b_zero_G_is_x0_then_zeros():
    _, m = benchmark_miqp("humanoid", 3)
    x0 = np.array([0.1, -0.2])
    b = rhs_b(m, x0, np.ones((3, 2)))
    np.testing.assert_array_equal(b, np.concatenate([x0, np.zeros(6)]))


def test_rhs_b_blocks_hold_G_columns():
    m = toy_miqp(4)
    delta = np.zeros((4, 1))
    delta[3] = 1
    b = rhs_b(m, [1.0, 2.0], delta)
    np.testing.assert_array_equal(b[:2], [1.0, 2.0])
    np.testing.assert_array_equal(b[8:10], m.source.G[:, 0])
    assert np.all(b[2:8] == 0)


def test_rhs_d_humanoid_blocks():
    _, m = benchmark_miqp("humanoid", 2)
    sys = m.source
    d0 = rhs_d(m, np.zeros((2, 2)))
    np.testing.assert_array_equal(d0, np.tile(sys.h, 2))
    delta = np.array([[0, 0], [1, 0]])
    d = rhs_d(m, delta).reshape(2, -1)
    diff = d[1] - sys.h
    changed = np.flatnonzero(diff)
    # Rows 7 and 9 (1-based) of the step's block move by F_max and M_g.
    np.testing.assert_array_equal(changed, [6, 8])
    assert diff[6] == pytest.approx(200.0)
    assert diff[8] == pytest.approx(-sys.H3[8, 0])
    assert rhs_d(m, delta).size == 2 * sys.dims.n_c


@given(st.integers(0, 2**31 - 1))
def test_forward_simulation_satisfies_equalities(seed):
    rng = np.random.default_rng(seed)
    m = toy_miqp(5)
    x0 = rng.normal(size=2)
    delta = rng.integers(0, 2, size=(5, 1))
    u = rng.normal(size=(5, 1))
    x = simulate_nominal(m, x0, delta, u)
    b = rhs_b(m, x0, delta)
    assert np.abs(m.A @ x - b).max() <= 1e-10 * max(1.0, np.abs(b).max())


@given(st.integers(0, 2**31 - 1))
def test_right_hand_sides_are_affine(seed):
    rng = np.random.default_rng(seed)
    _, m = benchmark_miqp("cartpole", 3)
    m2 = toy_miqp(3)
    for miqp in (m, m2):
        nx, nd = miqp.dims.n_x, miqp.dims.n_delta
        x0 = rng.normal(size=nx)
        d0, d1, d2 = (rng.integers(0, 2, size=(3, nd)).astype(float) for _ in range(3))
        lhs = rhs_b(miqp, x0, d1 + d2 - d0) + rhs_b(miqp, x0, d0)
        np.testing.assert_allclose(lhs, rhs_b(miqp, x0, d1) + rhs_b(miqp, x0, d2), atol=1e-12)
        lhs = rhs_d(miqp, d1 + d2 - d0) + rhs_d(miqp, d0)
        np.testing.assert_allclose(lhs, rhs_d(miqp, d1) + rhs_d(miqp, d2), atol=1e-9)


def test_stacking_is_deterministic():
    _, a = benchmark_miqp("cartpole", 5)
    _, b = benchmark_miqp("cartpole", 5)
    for name in ("Q", "A", "C", "x_g"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_binary_sequence_validation():
    np.testing.assert_array_equal(binary_sequence([1, 0, 1, 1], 2, 2), [[1, 0], [1, 1]])
    with pytest.raises(ValueError):
        binary_sequence([0.5, 1], 1, 2)
    with pytest.raises(DimensionError):
        binary_sequence([0, 1, 1], 2, 2)


def test_expm_and_zoh():
    M = np.array([[0.0, 1.0], [-4.0, 0.0]])
    t = 0.7
    expected = np.array([[np.cos(2 * t), np.sin(2 * t) / 2], [-2 * np.sin(2 * t), np.cos(2 * t)]])
    np.testing.assert_allclose(expm(M * t), expected, atol=1e-12)
    E, F, G = discretize_zoh([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], np.zeros((2, 0)), 0.1)
    np.testing.assert_allclose(E, [[1, 0.1], [0, 1]], atol=1e-14)
    np.testing.assert_allclose(F, [[0.005], [0.1]], atol=1e-14)
    assert G.shape == (2, 0)


def test_dual_delta_coefficients_match_direct_sum():
    rng = np.random.default_rng(3)
    m = toy_miqp(3)
    mu = rng.normal(size=m.A.shape[0])
    pi = rng.random(m.C.shape[0])
    psi = dual_delta_coefficients(m, mu, pi)
    x0 = rng.normal(size=2)
    for _ in range(5):
        d1, d2 = rng.integers(0, 2, size=(2, 3, 1))
        direct = (rhs_b(m, x0, d1) - rhs_b(m, x0, d2)) @ mu + (rhs_d(m, d1) - rhs_d(m, d2)) @ pi
        assert direct == pytest.approx(np.sum(psi * (d1 - d2)), abs=1e-10)


def test_json_round_trip():
    sys = build_humanoid()
    again = MldSystem.from_json(sys.to_json())
    for name in ("E", "F", "G", "H1", "H2", "H3", "h"):
        np.testing.assert_array_equal(getattr(sys, name), getattr(again, name))
    assert again.dims == sys.dims
