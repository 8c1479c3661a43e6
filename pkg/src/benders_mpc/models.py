"""Benchmark MLD systems: cart-pole between soft walls, free-flying robot, humanoid pendulum.

Cart-pole constraint rows per step (``n_c = 20``), with tip position
``y = x1 + l x2``, right penetration ``p1 = y - d1`` and left penetration
``p2 = -d2 - y``::

    wall w in (right, left), with force lam_w, bit delta_w, penetration p_w:
      0  -lam_w                        <= 0
      1   k p_w - lam_w                <= 0
      2   lam_w - k p_w                <= M (1 - delta_w)
      3   lam_w                        <= lam_max delta_w
      4   p_w                          <= M_p delta_w
    10,11  +-f   <= f_max
    12,13  +-x2  <= angle_limit
    14,15  +-x1  <= x1_max
    16,17  +-x3  <= v_cart_max
    18,19  +-x4  <= v_pole_max

so ``delta_w = 1`` forces the spring law ``lam_w = k p_w`` with ``p_w >= 0``,
and ``delta_w = 0`` forces ``lam_w = 0`` with ``p_w <= 0``.

Free-flyer rows per obstacle ``i`` (center ``c``, half-width ``a``): with the
2-bit code ``2 delta_a + delta_b`` selecting right (00), top (01), left (10)
or bottom (11) of the obstacle, each of the four half-plane rows is relaxed
by ``bigM`` times the Hamming distance between ``delta_i`` and its code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from benders_mpc.mld import MldSystem, discretize_zoh

GRAVITY = 9.81
MODEL_IDS = ("cartpole", "freeflyer", "humanoid")


class ParamsError(ValueError):
    pass


def _check_positive(obj, names):
    for name in names:
        v = getattr(obj, name)
        if not (np.isfinite(v) and v > 0):
            raise ParamsError(f"{type(obj).__name__}.{name} must be positive, got {v}")


class _Params:
    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParamsError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CartPoleParams(_Params):
    m_c: float = 1.0
    m_p: float = 0.4
    l: float = 0.6
    k1: float = 50.0
    k2: float = 50.0
    d1: float = 0.4
    d2: float = 0.4
    f_max: float = 20.0
    angle_limit: float = np.pi / 2
    dt: float = 0.02
    x1_max: float = 1.0
    v_cart_max: float = 5.0
    v_pole_max: float = 10.0
    lam_max: float | None = None  # derived from the boxes when None

    def __post_init__(self):
        _check_positive(
            self,
            ["m_c", "m_p", "l", "k1", "k2", "d1", "d2", "f_max", "angle_limit", "dt",
             "x1_max", "v_cart_max", "v_pole_max"],
        )
        if self.lam_max is not None:
            _check_positive(self, ["lam_max"])

    def tip_range(self):
        return self.x1_max + self.l * self.angle_limit


@dataclass(frozen=True)
class FreeFlyerParams(_Params):
    mass: float = 1.0
    obstacles: list = field(default_factory=lambda: [[[0.0, 1.5], 0.7], [[-1.5, 3.0], 0.7], [[1.5, 3.0], 0.7]])
    target: list = field(default_factory=lambda: [0.5, 5.0])
    f_max: float = 30.0
    v_max: float = 5.0
    dt: float = 0.02
    bigM: float = 30.0

    def __post_init__(self):
        _check_positive(self, ["mass", "f_max", "v_max", "dt", "bigM"])
        for ob in self.obstacles:
            center, width = ob
            if len(center) != 2 or not width > 0:
                raise ParamsError("each obstacle is [[cx, cy], width] with width > 0")
        if len(self.target) != 2:
            raise ParamsError("target must be a 2-vector")

    @property
    def M_o(self):
        return len(self.obstacles)


@dataclass(frozen=True)
class HumanoidParams(_Params):
    m: float = 25.0
    h_com: float = 0.4
    h_arm: float = 0.6
    l_arm: float = 0.2
    I_com: float = 0.8
    tau_max: float = 7.0
    F_max: float = 200.0
    d_R: float = 0.5
    d_L: float = -0.5
    mu_fric: float = 3.0
    M_g: float | None = None  # derived from a +-pi/2 lean box when None
    dt: float = 0.02

    def __post_init__(self):
        _check_positive(self, ["m", "h_com", "h_arm", "l_arm", "I_com", "tau_max", "F_max", "mu_fric", "dt"])
        if not (self.d_R > 0 > self.d_L):
            raise ParamsError("walls must satisfy d_L < 0 < d_R")
        if not (self.l_arm < abs(self.d_R) and self.l_arm < abs(self.d_L)):
            raise ParamsError("l_arm must be shorter than both wall distances")

    @property
    def big_m_geometric(self):
        if self.M_g is not None:
            return self.M_g
        reach = self.h_arm * np.pi / 2 + max(self.d_R - self.l_arm, -(self.d_L + self.l_arm))
        return 2.0 * reach

    @property
    def contact_angle(self):
        """Lean angle at which the right arm reaches its wall."""
        return (self.d_R - self.l_arm) / self.h_arm

    @property
    def breakdown_angle(self):
        """Lean at which the hand contact point would reach the body centerline.

        Past this angle the linear contact geometry no longer describes a
        hand braced against the wall, so the balance model has broken down.
        """
        return min(self.d_R, -self.d_L) / self.h_arm


PARAM_TYPES = {"cartpole": CartPoleParams, "freeflyer": FreeFlyerParams, "humanoid": HumanoidParams}


def load_params(model_id, path=None):
    cls = PARAM_TYPES[model_id]
    if path is None:
        return cls()
    with open(path) as fh:
        return cls.from_dict(json.load(fh))


def cartpole_big_m(p):
    """Big-M constants ``(lam_max, M, M_p)`` for the cart-pole wall rows, 2x margin over the boxes."""
    y = p.tip_range()
    pen_max = max(y - p.d1, y - p.d2)
    pen_min = min(-y - p.d1, -y - p.d2)
    k = max(p.k1, p.k2)
    lam_max = p.lam_max if p.lam_max is not None else 2.0 * k * pen_max
    # Row 2 only needs relaxing when the wall is out of contact, where lam = 0.
    M = -2.0 * k * pen_min
    M_p = 2.0 * pen_max
    return lam_max, M, M_p


def cartpole_continuous(p):
    """Linearized continuous-time cart-pole ``(Ec, Fc)`` with inputs ``[f, lam1, lam2]``."""
    g = GRAVITY
    Ec = np.zeros((4, 4))
    Ec[0, 2] = Ec[1, 3] = 1.0
    Ec[2, 1] = -p.m_p * g / p.m_c
    Ec[3, 1] = g * (p.m_c + p.m_p) / (p.l * p.m_c)
    Fc = np.zeros((4, 3))
    Fc[2, 0] = 1.0 / p.m_c
    Fc[3, 0] = -1.0 / (p.l * p.m_c)
    Fc[3, 1] = -1.0 / (p.l * p.m_p)
    Fc[3, 2] = 1.0 / (p.l * p.m_p)
    return Ec, Fc


def build_cartpole(p=None):
    p = p or CartPoleParams()
    Ec, Fc = cartpole_continuous(p)
    E, F, G = discretize_zoh(Ec, Fc, np.zeros((4, 2)), p.dt)
    lam_max, M, M_p = cartpole_big_m(p)
    H1 = np.zeros((20, 4))
    H2 = np.zeros((20, 3))
    H3 = np.zeros((20, 2))
    h = np.zeros(20)
    tip = np.array([1.0, p.l, 0.0, 0.0])
    # penetration p_w = s_w * tip . x - d_w
    walls = [(1.0, p.k1, p.d1), (-1.0, p.k2, p.d2)]
    for w, (s, k, d) in enumerate(walls):
        r = 5 * w
        lam = 1 + w
        H2[r, lam] = -1.0
        H1[r + 1] = k * s * tip
        H2[r + 1, lam] = -1.0
        h[r + 1] = k * d
        H1[r + 2] = -k * s * tip
        H2[r + 2, lam] = 1.0
        h[r + 2] = -k * d + M
        H3[r + 2, w] = M
        H2[r + 3, lam] = 1.0
        H3[r + 3, w] = -lam_max
        H1[r + 4] = s * tip
        h[r + 4] = d
        H3[r + 4, w] = -M_p
    H2[10, 0], H2[11, 0] = 1.0, -1.0
    h[10] = h[11] = p.f_max
    for row, (idx, lim) in zip(range(12, 20, 2), [(1, p.angle_limit), (0, p.x1_max), (2, p.v_cart_max), (3, p.v_pole_max)]):
        H1[row, idx], H1[row + 1, idx] = 1.0, -1.0
        h[row] = h[row + 1] = lim
    return MldSystem(E=E, F=F, G=G, H1=H1, H2=H2, H3=H3, h=h, dt=p.dt)


def build_freeflyer(p=None):
    p = p or FreeFlyerParams()
    dt, I2 = p.dt, np.eye(2)
    E = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
    F = np.vstack([0.5 * dt**2 * I2, dt * I2]) / p.mass
    M_o = p.M_o
    n_c = 4 * M_o + 8
    H1 = np.zeros((n_c, 4))
    H2 = np.zeros((n_c, 2))
    H3 = np.zeros((n_c, 2 * M_o))
    h = np.zeros(n_c)
    M = p.bigM
    # (axis, sign, code): row reads sign * pos[axis] >= sign * (c[axis] + sign * a)
    sides = [(0, 1.0, (0, 0)), (1, 1.0, (0, 1)), (0, -1.0, (1, 0)), (1, -1.0, (1, 1))]
    for i, (center, width) in enumerate(p.obstacles):
        a = 0.5 * width
        for j, (axis, sign, code) in enumerate(sides):
            r = 4 * i + j
            H1[r, axis] = -sign
            # Hamming distance to code: sum_b (delta_b if code_b == 0 else 1 - delta_b)
            h[r] = -sign * center[axis] - a + M * sum(code)
            for b in range(2):
                H3[r, 2 * i + b] = -M if code[b] == 0 else M
    r0 = 4 * M_o
    for j in range(2):
        H1[r0 + 2 * j, 2 + j], H1[r0 + 2 * j + 1, 2 + j] = 1.0, -1.0
        h[r0 + 2 * j] = h[r0 + 2 * j + 1] = p.v_max
        H2[r0 + 4 + 2 * j, j], H2[r0 + 4 + 2 * j + 1, j] = 1.0, -1.0
        h[r0 + 4 + 2 * j] = h[r0 + 4 + 2 * j + 1] = p.f_max
    return MldSystem(E=E, F=F, G=np.zeros((4, 2 * M_o)), H1=H1, H2=H2, H3=H3, h=h, dt=dt)


def build_humanoid(p=None):
    p = p or HumanoidParams()
    m, g, hc, ha, I, dT = p.m, GRAVITY, p.h_com, p.h_arm, p.I_com, p.dt
    Mg = p.big_m_geometric
    E = np.array([[1.0, dT], [m * g * hc * dT / I, 1.0]])
    F = np.array([[0.0, 0.0, 0.0], [dT / I, -ha * dT / I, ha * dT / I]])
    G = np.zeros((2, 2))
    a = m**2 * g * hc**2 / I
    b = m * hc / I
    c = 1.0 - m * hc * ha / I
    H1 = np.array([[a, 0], [-a, 0], [0, 0], [0, 0], [0, 0], [0, 0], [0, 0], [0, 0], [-ha, 0], [ha, 0]], dtype=float)
    H2 = np.array(
        [[b, c, -c], [-b, -c, c], [1, 0, 0], [-1, 0, 0], [0, -1, 0], [0, 0, -1], [0, 1, 0], [0, 0, 1], [0, 0, 0], [0, 0, 0]],
        dtype=float,
    )
    H3 = np.array(
        [[0, 0], [0, 0], [0, 0], [0, 0], [0, 0], [0, 0], [-p.F_max, 0], [0, -p.F_max], [Mg, 0], [0, Mg]], dtype=float
    )
    mumg = p.mu_fric * m * g
    h = np.array(
        [mumg, mumg, p.tau_max, p.tau_max, 0, 0, 0, 0, -(p.d_R - p.l_arm) + Mg, (p.d_L + p.l_arm) + Mg], dtype=float
    )
    return MldSystem(E=E, F=F, G=G, H1=H1, H2=H2, H3=H3, h=h, dt=dT)


def riccati_step(P, E, F, Q, R):
    FtP = F.T @ P
    K = np.linalg.solve(R + FtP @ F, FtP @ E)
    Pn = Q + E.T @ P @ E - E.T @ P @ F @ K
    return 0.5 * (Pn + Pn.T)


def riccati_terminal(E, F, Q, R, tol=1e-10, max_iter=10_000):
    """Fixed point of the discrete Riccati recursion, iterated from ``P = Q``."""
    P = Q.copy()
    for _ in range(max_iter):
        Pn = riccati_step(P, E, F, Q, R)
        if np.abs(Pn - P).max() <= tol * max(1.0, np.abs(Pn).max()):
            return Pn
        P = Pn
    raise RuntimeError("Riccati recursion did not converge")


def default_weights(model_id, params=None):
    """``(Q_k, R_k, Q_N)`` for a benchmark; ``Q_N`` from the contact-free Riccati fixed point."""
    if model_id == "cartpole":
        sys = build_cartpole(params)
        Q, R = np.diag([1.0, 50.0, 1.0, 50.0]), 0.1 * np.eye(3)
        actuated = [0]
    elif model_id == "freeflyer":
        sys = build_freeflyer(params)
        Q, R = np.diag([100.0, 100.0, 1.0, 1.0]), np.eye(2)
        actuated = [0, 1]
    elif model_id == "humanoid":
        sys = build_humanoid(params)
        Q, R = np.diag([10.0, 1.0]), np.diag([1.0, 1e-3, 1e-3])
        actuated = [0]
    else:
        raise ParamsError(f"unknown model id {model_id!r}; expected one of {MODEL_IDS}")
    QN = riccati_terminal(sys.E, sys.F[:, actuated], Q, R[np.ix_(actuated, actuated)])
    return Q, R, QN


@dataclass(frozen=True, eq=False)
class Benchmark:
    """Everything the closed-loop harness needs for one model."""

    model_id: str
    params: object
    sys: MldSystem
    weights: tuple
    x_goal: np.ndarray
    x0_default: np.ndarray
    disturbance_kind: str  # gaussian | uniform
    disturbance_scale: float
    disturbance_map: np.ndarray  # n_x x n_w, maps a physical disturbance into a state increment
    breakdown_angle: float | None = None

    def plant_step(self, x, u, w):
        """True one-step plant: nominal MLD dynamics with physical contact forces and disturbance."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).copy()
        if self.model_id == "cartpole":
            p = self.params
            y = x[0] + p.l * x[1]
            u[1] = p.k1 * max(0.0, y - p.d1)
            u[2] = p.k2 * max(0.0, -p.d2 - y)
        nominal = self.sys.E @ x + self.sys.F @ u
        return nominal + self.disturbance_map @ np.asarray(w, dtype=float)

    def contact_bits(self, delta):
        return np.asarray(delta).reshape(-1, self.sys.dims.n_delta)


def make_benchmark(model_id, params=None):
    if model_id not in PARAM_TYPES:
        raise ParamsError(f"unknown model id {model_id!r}; expected one of {MODEL_IDS}")
    params = params or PARAM_TYPES[model_id]()
    weights = default_weights(model_id, params)
    if model_id == "cartpole":
        sys = build_cartpole(params)
        Gd = np.zeros((4, 1))
        Gd[3, 0] = params.dt
        return Benchmark(model_id, params, sys, weights, np.zeros(4), np.array([0.0, np.deg2rad(10.0), 0.0, 0.0]),
                         "gaussian", 8.0, Gd)
    if model_id == "freeflyer":
        sys = build_freeflyer(params)
        Gd = np.zeros((4, 2))
        Gd[2, 0] = Gd[3, 1] = params.dt / params.mass
        goal = np.array([params.target[0], params.target[1], 0.0, 0.0])
        return Benchmark(model_id, params, sys, weights, goal, np.zeros(4), "gaussian", 10.0, Gd)
    sys = build_humanoid(params)
    Gd = np.array([[0.0], [params.dt / params.I_com]])
    return Benchmark(model_id, params, sys, weights, np.zeros(2), np.array([0.05, 0.0]), "uniform", 10.0, Gd,
                     breakdown_angle=params.breakdown_angle)
