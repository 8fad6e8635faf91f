"""Local trajectory planner: a finite-horizon optimal control problem whose
solution is simultaneously the maneuver decision and the reference trajectory.

The planner optimizes jointly over a state sequence and an input sequence of a
point-mass model in road-aligned coordinates (direct multiple shooting, RK4
discretization).  Static potentials shape speed and lane preference, the
time-varying obstacle fields enter both as a weighted cost and as hard
inequality constraints, and a safe-stop terminal set guarantees a feasible
braking continuation behind the nearest same-lane leader.  There is no
maneuver enumeration anywhere: overtaking, following and lane keeping all
emerge from the one continuous program.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .geometry import ReferencePath
from .potentials import (PotentialConfig, boundary_potential,
                         boundary_potential_grad, effective_speed,
                         lane_potential, lane_potential_grad)
from .prediction import TvapfParams, _scales_from_spread
from .solver import NlpProblem, SolveOptions, SolveResult, SolveStatus, solve


class Infeasible(Exception):
    """No feasible trajectory exists for the posed program."""


class EmptyTerminalSet(Exception):
    """The safe-stop box lies behind the current ego position."""


@dataclass(frozen=True)
class EgoModelState:
    """Point-mass planning state in road-aligned coordinates."""

    s: float
    d: float
    psi: float
    nu: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.d, self.psi, self.nu])

    @staticmethod
    def from_array(x) -> "EgoModelState":
        return EgoModelState(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class ControlInput:
    """Planner input: longitudinal acceleration and heading rate."""

    alpha: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.omega])


@dataclass(frozen=True)
class PlannerConfig:
    """Horizon, admissible sets and terminal-set parameters of the planner."""

    T_sL: float = 0.5
    N_L: int = 70
    instance_period: float = 5.0
    # admissible state set
    v_min: float = 0.0
    v_max: float = 12.5
    psi_max: float = 1.2
    d_margin: float = 0.2
    # admissible input set
    alpha_min: float = -0.9
    alpha_max: float = 0.9
    omega_max: float = 0.0775
    # headroom the planner leaves inside its own input box so the tracker,
    # whose authority is strictly inside the planner's, can still reject
    # disturbances while tracking a saturated plan
    alpha_margin: float = 0.1
    omega_margin: float = 0.005
    # admissible input-rate set (per step); None disables the bound
    delta_alpha_max: float | None = 0.3
    delta_omega_max: float | None = None
    # terminal-set parameters
    tau: float = 0.5
    j_max: float = 0.9
    nu_ter: float = 5.0
    eps_d: float = 0.5
    eps_psi: float = 0.1
    # obstacle-field cost weight
    K_o: float = 20.0
    solver: SolveOptions = field(default_factory=lambda: SolveOptions(
        tol=1e-6, max_iter=150))

    def __post_init__(self):
        if self.T_sL <= 0 or self.N_L < 1:
            raise ValueError("need T_sL > 0 and N_L >= 1")
        ratio = self.instance_period / self.T_sL
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("instance_period must be a positive multiple of T_sL")
        if not (0 <= self.v_min < self.v_max):
            raise ValueError("velocity box empty")
        if not (self.alpha_min < 0 < self.alpha_max):
            raise ValueError("acceleration box must contain 0 with alpha_min < 0")
        if not (0 <= self.alpha_margin < self.alpha_max
                and 0 <= self.omega_margin < self.omega_max):
            raise ValueError("input margins must leave a non-empty usable box")
        if self.omega_max <= 0 or not 0 < self.psi_max < math.pi / 2:
            raise ValueError("invalid heading limits")
        if self.j_max <= 0 or self.tau < 0 or self.nu_ter <= 0:
            raise ValueError("invalid terminal parameters")
        if self.eps_d <= 0 or self.eps_psi <= 0:
            raise ValueError("terminal box tolerances must be positive")

    @property
    def shift_steps(self) -> int:
        return int(round(self.instance_period / self.T_sL))


@dataclass(frozen=True)
class TerminalBox:
    """Axis-aligned safe-stop terminal set."""

    s_max: float
    d_center: float
    eps_d: float
    eps_psi: float
    nu_max: float

    def contains(self, x: EgoModelState, tol: float = 1e-6) -> bool:
        return (x.s <= self.s_max + tol
                and abs(x.d - self.d_center) <= self.eps_d + tol
                and abs(x.psi) <= self.eps_psi + tol
                and -tol <= x.nu <= self.nu_max + tol)


@dataclass(frozen=True)
class PlannedTrajectory:
    """Published output of one planner instance.

    ``states`` has N_L + 1 entries (index j at time t0 + j*T_sL); ``inputs``
    has N_L entries, input j held over [t0 + j*T_sL, t0 + (j+1)*T_sL).
    """

    t0: float
    T_sL: float
    states: tuple
    inputs: tuple
    solve_stats: dict = field(default_factory=dict)
    fallback: bool = False

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    @property
    def t_end(self) -> float:
        return self.t0 + self.horizon * self.T_sL


class Decision(enum.Enum):
    KEEP_LANE = "KeepLane"
    FOLLOW_LEADER = "FollowLeader"
    OVERTAKE = "Overtake"
    SAFE_STOP = "SafeStop"


# -- dynamics ---------------------------------------------------------------


def _f(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    s, d, psi, nu = x
    return np.array([nu * math.cos(psi), nu * math.sin(psi), u[1], u[0]])


def _A(x: np.ndarray) -> np.ndarray:
    _, _, psi, nu = x
    A = np.zeros((4, 4))
    A[0, 2] = -nu * math.sin(psi)
    A[0, 3] = math.cos(psi)
    A[1, 2] = nu * math.cos(psi)
    A[1, 3] = math.sin(psi)
    return A


_B = np.array([[0.0, 0.0],
               [0.0, 0.0],
               [0.0, 1.0],
               [1.0, 0.0]])


def _rk4_step(x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = _f(x, u)
    k2 = _f(x + 0.5 * h * k1, u)
    k3 = _f(x + 0.5 * h * k2, u)
    k4 = _f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_jacobians(x: np.ndarray, u: np.ndarray, h: float):
    """Next state plus its Jacobians w.r.t. x and u (chain rule through the
    four stages)."""
    I = np.eye(4)
    k1 = _f(x, u)
    x2 = x + 0.5 * h * k1
    k2 = _f(x2, u)
    x3 = x + 0.5 * h * k2
    k3 = _f(x3, u)
    x4 = x + h * k3
    k4 = _f(x4, u)

    A1 = _A(x)
    dk1x, dk1u = A1, _B
    A2 = _A(x2)
    dk2x = A2 @ (I + 0.5 * h * dk1x)
    dk2u = A2 @ (0.5 * h * dk1u) + _B
    A3 = _A(x3)
    dk3x = A3 @ (I + 0.5 * h * dk2x)
    dk3u = A3 @ (0.5 * h * dk2u) + _B
    A4 = _A(x4)
    dk4x = A4 @ (I + h * dk3x)
    dk4u = A4 @ (h * dk3u) + _B

    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Fx = I + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    Fu = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return x_next, Fx, Fu


def discretize_dynamics(xi: EgoModelState, lam: ControlInput,
                        T_sL: float) -> EgoModelState:
    """One zero-order-hold step of the point-mass model."""
    if T_sL <= 0:
        raise ValueError("T_sL must be positive")
    return EgoModelState.from_array(
        _rk4_step(xi.as_array(), lam.as_array(), T_sL))


# -- terminal set -----------------------------------------------------------


def braking_distance(nu_ter: float, tau: float, alpha_min: float,
                     j_max: float) -> float:
    """Stopping distance from speed nu_ter: reaction delay, jerk-limited
    ramp-in, then constant maximum deceleration."""
    if alpha_min >= 0 or j_max <= 0 or tau < 0:
        raise ValueError("need alpha_min < 0, j_max > 0, tau >= 0")
    a = abs(alpha_min)
    return nu_ter * (tau + a / j_max + nu_ter / (2.0 * a))


def _lane_leaders(forecasts, path: ReferencePath, xi0: EgoModelState):
    """Forecasts ahead of the ego in its current lane, nearest first."""
    ego_lane_center = path.lane_center(path.lane_index_of(xi0.d))
    leaders = [fc for fc in forecasts
               if abs(fc.d_o - ego_lane_center) < 0.5 * path.lane_width
               and fc.s_center[0] > xi0.s]
    leaders.sort(key=lambda fc: float(fc.s_center[0]))
    return leaders


def _terminal_box(leaders, cfg: PlannerConfig, path: ReferencePath,
                  xi0: EgoModelState, d_center: float | None) -> TerminalBox:
    if d_center is None:
        d_center = path.rightmost_lane_center
    D = braking_distance(cfg.nu_ter, cfg.tau, cfg.alpha_min, cfg.j_max)
    s_t = path.length
    for fc in leaders:
        N = fc.steps
        s_t = min(s_t, float(fc.s_center[N] - 0.5 * fc.delta_s[N] - D))
    if s_t < xi0.s:
        raise EmptyTerminalSet(
            f"safe-stop bound s_t={s_t:.2f} behind ego s={xi0.s:.2f}")
    return TerminalBox(s_max=s_t, d_center=float(d_center), eps_d=cfg.eps_d,
                       eps_psi=cfg.eps_psi, nu_max=cfg.nu_ter)


def terminal_set(forecasts, cfg: PlannerConfig, path: ReferencePath,
                 xi0: EgoModelState, d_center: float | None = None) -> TerminalBox:
    """Safe-stop box at the end of the horizon.

    The longitudinal bound s_t sits the ego stopping distance behind the
    lower edge of the end-of-horizon reachable set of the nearest leading
    obstacle in the ego lane; lateral/heading/speed bounds are fixed
    tolerances around a stand-still in lane.
    """
    return _terminal_box(_lane_leaders(forecasts, path, xi0), cfg, path, xi0,
                         d_center)


# -- initial guess / warm start --------------------------------------------


def _rollout(x0: np.ndarray, inputs: np.ndarray, h: float) -> np.ndarray:
    xs = np.empty((len(inputs) + 1, 4))
    xs[0] = x0
    for j, u in enumerate(inputs):
        xs[j + 1] = _rk4_step(xs[j], u, h)
    return xs


def shift_warm_start(warm: PlannedTrajectory, cfg: PlannerConfig):
    """Shift the previous solution by one instance period and pad by coasting.

    Returns (states (N_L+1, 4), inputs (N_L, 2)) aligned with the new t0.
    """
    k = cfg.shift_steps
    states = np.array([x.as_array() for x in warm.states])
    inputs = np.array([u.as_array() for u in warm.inputs])
    if k >= len(inputs):
        k = len(inputs) - 1
    states = states[k:]
    inputs = inputs[k:]
    pad = cfg.N_L - len(inputs)
    if pad > 0:
        coast = np.zeros((pad, 2))
        tail = _rollout(states[-1], coast, cfg.T_sL)
        states = np.vstack([states, tail[1:]])
        inputs = np.vstack([inputs, coast])
    return states[:cfg.N_L + 1], inputs[:cfg.N_L]


def _initial_guess(xi0: EgoModelState, cfg: PlannerConfig,
                   warm_start: PlannedTrajectory | None):
    if warm_start is not None and not warm_start.fallback:
        states, inputs = shift_warm_start(warm_start, cfg)
        states = states.copy()
        states[0] = xi0.as_array()
        return states, inputs
    inputs = np.zeros((cfg.N_L, 2))
    states = _rollout(xi0.as_array(), inputs, cfg.T_sL)
    return states, inputs


def _follow_guess(xi0: EgoModelState, leader, box: TerminalBox,
                  cfg: PlannerConfig):
    """Leader-following initial guess: relax toward the leader's pace while
    staying behind its predicted rear edge and inside the safe-stop bound."""
    N, h = cfg.N_L, cfg.T_sL
    v_lead = max((float(leader.s_center[leader.steps])
                  - float(leader.s_center[0])) / (leader.steps * h), 0.0)
    rate = 0.25
    nu = np.empty(N + 1)
    nu[0] = xi0.nu
    for j in range(N):
        nu[j + 1] = nu[j] + float(np.clip(v_lead - nu[j], -rate * h, rate * h))
    s = np.empty(N + 1)
    s[0] = xi0.s
    s[1:] = xi0.s + np.cumsum(0.5 * h * (nu[:-1] + nu[1:]))

    env = np.full(N + 1, np.inf)
    for j in range(1, N + 1):
        env[j] = float(leader.s_min[min(j, leader.steps)]) - 20.0
    env[N] = min(env[N], box.s_max - 1.0)
    s = np.maximum.accumulate(np.minimum(s, env))
    nu = np.clip(np.diff(s, append=s[-1]) / h, 0.0, cfg.v_max)
    nu[-1] = min(nu[-1], cfg.nu_ter)

    d = np.full(N + 1, box.d_center)
    d[0] = xi0.d
    psi = np.zeros(N + 1)
    psi[0] = xi0.psi
    omega = np.clip(np.diff(psi) / h, -cfg.omega_max, cfg.omega_max)
    alpha = np.clip(np.diff(nu) / h, cfg.alpha_min, cfg.alpha_max)
    states = np.stack([s, d, psi, nu], axis=1)
    inputs = np.stack([alpha, omega], axis=1)
    return states, inputs


def _pass_guess(xi0: EgoModelState, leader, cfg: PlannerConfig,
                path: ReferencePath, pcfg: PotentialConfig):
    """Kinematically plausible overtaking initial guess: speed up toward the
    desired speed, sidestep into the next lane while overlapping the leader's
    reachable set, merge back and ramp down to the terminal speed."""
    N, h = cfg.N_L, cfg.T_sL
    v_tgt = min(pcfg.v_des, cfg.v_max)
    rate = 0.3  # gentle guess acceleration, m/s^2

    nu = np.empty(N + 1)
    nu[0] = xi0.nu
    for j in range(N):
        v_stop_ok = cfg.nu_ter + rate * h * (N - j - 1)
        tgt = min(v_tgt, v_stop_ok)
        nu[j + 1] = nu[j] + float(np.clip(tgt - nu[j], -rate * h, rate * h))
    s = np.empty(N + 1)
    s[0] = xi0.s
    s[1:] = xi0.s + np.cumsum(0.5 * h * (nu[:-1] + nu[1:]))

    right_c = path.rightmost_lane_center
    left_c = path.lane_center(1) if path.lane_count > 1 else right_c
    raw = np.full(N + 1, right_c)
    for j in range(1, N + 1):
        if leader.s_min[min(j, leader.steps)] - 30.0 < s[j] < \
                leader.s_max[min(j, leader.steps)] + 15.0:
            raw[j] = left_c
    raw[-5:] = right_c
    kernel = np.ones(9) / 9.0
    d = np.convolve(np.pad(raw, 4, mode="edge"), kernel, mode="valid")
    d[0] = xi0.d

    psi = np.zeros(N + 1)
    psi[0] = xi0.psi
    for j in range(1, N):
        psi[j] = math.asin(float(np.clip(
            (d[j + 1] - d[j]) / (h * max(nu[j], 1.0)), -0.9, 0.9)))
    omega = np.clip(np.diff(psi) / h, -cfg.omega_max, cfg.omega_max)
    alpha = np.clip(np.diff(nu) / h, cfg.alpha_min, cfg.alpha_max)
    states = np.stack([s, d, psi, nu], axis=1)
    inputs = np.stack([alpha, omega], axis=1)
    return states, inputs


# -- FHOCP assembly ---------------------------------------------------------


class _LtpProgram:
    """Callbacks of the multiple-shooting NLP for one planner instance.

    Decision vector z = [x_1 .. x_N  (4 each) | u_0 .. u_{N-1} (2 each)];
    the initial state is a fixed parameter.
    """

    def __init__(self, xi0, forecasts, path, cfg: PlannerConfig,
                 pcfg: PotentialConfig, tvapf: TvapfParams,
                 guess_states, guess_inputs, box: TerminalBox,
                 alpha_prev: float | None):
        self.x0 = xi0.as_array()
        self.forecasts = list(forecasts)
        self.path = path
        self.cfg = cfg
        self.pcfg = pcfg
        self.tvapf = tvapf
        self.N = cfg.N_L
        self.n = 6 * self.N
        self.box = box
        self.alpha_prev = alpha_prev

        # per-step speed reference, frozen along the guess trajectory
        s_ref = np.clip(guess_states[1:, 0], 0.0, path.length)
        nu_ref = np.maximum(guess_states[1:, 3], 0.5)
        omega_ref = guess_inputs[:, 1]
        kappa_eff = np.abs(path.curvature(s_ref)) + np.abs(omega_ref) / nu_ref
        self.v_bar = effective_speed(pcfg.v_des, path.speed_limit_at(s_ref),
                                     kappa_eff, pcfg.a_l_max)

        self.z0 = np.concatenate([guess_states[1:].ravel(),
                                  guess_inputs.ravel()])
        self.lb, self.ub = self._bounds()

        # per-forecast field parameters over steps 1..N, vectorized
        self._fc_data = []
        for fc in self.forecasts:
            gamma_s, gamma_d = _scales_from_spread(fc.delta_s[1:self.N + 1],
                                                   tvapf)
            self._fc_data.append((fc.s_center[1:self.N + 1],
                                  np.broadcast_to(np.asarray(gamma_s, dtype=float),
                                                  (self.N,)).copy(),
                                  np.broadcast_to(np.asarray(gamma_d, dtype=float),
                                                  (self.N,)).copy(),
                                  fc.d_o))

    # layout helpers
    def _states(self, z):
        return z[:4 * self.N].reshape(self.N, 4)

    def _inputs(self, z):
        return z[4 * self.N:].reshape(self.N, 2)

    def _bounds(self):
        N, cfg, path = self.N, self.cfg, self.path
        lb = np.empty(self.n)
        ub = np.empty(self.n)
        xs_lb = np.array([0.0, path.right_edge_offset + cfg.d_margin,
                          -cfg.psi_max, cfg.v_min])
        xs_ub = np.array([path.length, path.left_edge_offset - cfg.d_margin,
                          cfg.psi_max, cfg.v_max])
        lb[:4 * N] = np.tile(xs_lb, N)
        ub[:4 * N] = np.tile(xs_ub, N)
        # terminal safe-stop box intersected with the state box
        t = slice(4 * (N - 1), 4 * N)
        lb[t] = np.maximum(lb[t], [0.0, self.box.d_center - self.box.eps_d,
                                   -self.box.eps_psi, 0.0])
        ub[t] = np.minimum(ub[t], [self.box.s_max,
                                   self.box.d_center + self.box.eps_d,
                                   self.box.eps_psi, self.box.nu_max])
        if np.any(ub[t] - lb[t] <= 0):
            raise Infeasible("terminal set does not intersect the state box")
        u_lb = np.array([cfg.alpha_min + cfg.alpha_margin,
                         -(cfg.omega_max - cfg.omega_margin)])
        u_ub = np.array([cfg.alpha_max - cfg.alpha_margin,
                         cfg.omega_max - cfg.omega_margin])
        lb[4 * N:] = np.tile(u_lb, N)
        ub[4 * N:] = np.tile(u_ub, N)
        return lb, ub

    # -- cost --------------------------------------------------------------

    def objective(self, z):
        X = self._states(z)
        U = self._inputs(z)
        d = X[:, 1]
        nu = X[:, 3]
        path, pcfg = self.path, self.pcfg
        h_l = path.left_edge_offset - d
        h_r = d - path.right_edge_offset
        h_c = (path.right_edge_offset + path.lane_width) - d
        J = pcfg.K_v * float(np.sum((nu - self.v_bar) ** 2))
        J += pcfg.K_b * float(np.sum(boundary_potential(h_l, h_r, pcfg.eta)))
        J += pcfg.K_l * float(np.sum(lane_potential(h_c)))
        # comfort: input j paired with the speed state at the same step
        nu_at_u = np.concatenate([[self.x0[3]], nu[:-1]])
        J += pcfg.K_c * float(np.sum((nu_at_u * U[:, 1]) ** 2))
        J += self.cfg.K_o * float(np.sum(self._field(X)))
        return J

    def _field(self, X):
        O = np.zeros(self.N)
        c = self.tvapf.c
        for center, gamma_s, gamma_d, d_o in self._fc_data:
            xs = (X[:, 0] - center) / gamma_s
            xd = (X[:, 1] - d_o) / gamma_d
            O += np.exp(-(xs ** c + xd ** c))
        return O

    def _field_grad(self, X):
        """(dO/ds_j, dO/dd_j) arrays over the horizon."""
        c = self.tvapf.c
        gs = np.zeros(self.N)
        gd = np.zeros(self.N)
        for center, gamma_s, gamma_d, d_o in self._fc_data:
            xs = (X[:, 0] - center) / gamma_s
            xd = (X[:, 1] - d_o) / gamma_d
            w = np.exp(-(xs ** c + xd ** c))
            gs += -w * c * xs ** (c - 1) / gamma_s
            gd += -w * c * xd ** (c - 1) / gamma_d
        return gs, gd

    def gradient(self, z):
        X = self._states(z)
        U = self._inputs(z)
        d = X[:, 1]
        nu = X[:, 3]
        path, pcfg = self.path, self.pcfg
        g = np.zeros(self.n)
        gX = g[:4 * self.N].reshape(self.N, 4)
        gU = g[4 * self.N:].reshape(self.N, 2)

        gX[:, 3] += 2.0 * pcfg.K_v * (nu - self.v_bar)

        h_l = path.left_edge_offset - d
        h_r = d - path.right_edge_offset
        h_c = (path.right_edge_offset + path.lane_width) - d
        gl, gr = boundary_potential_grad(h_l, h_r, pcfg.eta)
        gX[:, 1] += pcfg.K_b * (-gl + gr)
        gX[:, 1] += pcfg.K_l * (-lane_potential_grad(h_c))

        nu_at_u = np.concatenate([[self.x0[3]], nu[:-1]])
        gU[:, 1] += 2.0 * pcfg.K_c * nu_at_u ** 2 * U[:, 1]
        gX[:-1, 3] += 2.0 * pcfg.K_c * nu_at_u[1:] * U[1:, 1] ** 2

        gs, gd = self._field_grad(X)
        gX[:, 0] += self.cfg.K_o * gs
        gX[:, 1] += self.cfg.K_o * gd
        return g

    def hessian(self, z, y_eq, w_ineq):
        """Positive-semidefinite Gauss-Newton approximation of the cost
        Hessian; constraint curvature is left to the interior-point method."""
        X = self._states(z)
        U = self._inputs(z)
        d = X[:, 1]
        nu = X[:, 3]
        path, pcfg = self.path, self.pcfg
        rows, cols, vals = [], [], []

        def add(i, j, v):
            rows.append(i)
            cols.append(j)
            vals.append(v)

        for j in range(self.N):
            base = 4 * j
            add(base + 3, base + 3, 2.0 * pcfg.K_v)
            # lateral curvature, clamped to keep the block PSD
            dj = d[j]
            h_l = path.left_edge_offset - dj
            h_r = dj - path.right_edge_offset
            h_c = (path.right_edge_offset + path.lane_width) - dj
            eta = pcfg.eta
            cb = 0.0
            for hh in (h_l, h_r):
                x = eta * hh
                cb += eta * eta * (16.0 * x ** 6 - 12.0 * x ** 2) * math.exp(-x ** 4)
            w = 1.0 / (1.0 + math.exp(h_c))
            cl = w * (1.0 - w) * (1.0 - 2.0 * w)
            add(base + 1, base + 1,
                max(pcfg.K_b * cb + pcfg.K_l * cl, 0.0) + 1e-8)

        # obstacle-field curvature (cost weight + constraint multiplier),
        # per-step 2x2 block over (s, d), projected onto the PSD cone
        c = self.tvapf.c
        Wss = np.zeros(self.N)
        Wsd = np.zeros(self.N)
        Wdd = np.zeros(self.N)
        for center, gamma_s, gamma_d, d_o in self._fc_data:
            xs = (X[:, 0] - center) / gamma_s
            xd = (X[:, 1] - d_o) / gamma_d
            w = np.exp(-(xs ** c + xd ** c))
            Wss += w * (c * c * xs ** (2 * c - 2)
                        - c * (c - 1) * xs ** (c - 2)) / gamma_s ** 2
            Wdd += w * (c * c * xd ** (2 * c - 2)
                        - c * (c - 1) * xd ** (c - 2)) / gamma_d ** 2
            Wsd += w * c * c * xs ** (c - 1) * xd ** (c - 1) / (gamma_s * gamma_d)
        mult = self.cfg.K_o + (np.asarray(w_ineq[:self.N], dtype=float)
                               if w_ineq is not None and len(w_ineq) >= self.N
                               else 0.0)
        for j in range(self.N):
            a = mult[j] * Wss[j] if np.ndim(mult) else mult * Wss[j]
            b = mult[j] * Wsd[j] if np.ndim(mult) else mult * Wsd[j]
            e = mult[j] * Wdd[j] if np.ndim(mult) else mult * Wdd[j]
            half = 0.5 * (a - e)
            disc = math.sqrt(half * half + b * b)
            l1 = 0.5 * (a + e) + disc
            l2 = 0.5 * (a + e) - disc
            if l1 <= 0.0:
                continue
            base = 4 * j
            if l2 >= 0.0:
                add(base, base, a)
                add(base, base + 1, b)
                add(base + 1, base, b)
                add(base + 1, base + 1, e)
            else:
                vx, vy = (b, l1 - a) if abs(b) > 1e-300 else (
                    (1.0, 0.0) if a >= e else (0.0, 1.0))
                norm2 = vx * vx + vy * vy
                if norm2 <= 0.0:
                    continue
                scale = l1 / norm2
                add(base, base, scale * vx * vx)
                add(base, base + 1, scale * vx * vy)
                add(base + 1, base, scale * vx * vy)
                add(base + 1, base + 1, scale * vy * vy)

        nu_at_u = np.concatenate([[self.x0[3]], nu[:-1]]).copy()
        for j in range(self.N):
            iu = 4 * self.N + 2 * j + 1
            v = nu_at_u[j]
            om = U[j, 1]
            add(iu, iu, 2.0 * pcfg.K_c * v * v + 1e-8)
            if j >= 1:
                inu = 4 * (j - 1) + 3
                add(inu, inu, 2.0 * pcfg.K_c * om * om)
                cross = 2.0 * pcfg.K_c * v * om
                add(inu, iu, cross)
                add(iu, inu, cross)
        return sp.coo_matrix((vals, (rows, cols)),
                             shape=(self.n, self.n)).tocsr()

    # -- dynamics equalities ------------------------------------------------

    def eq_constraints(self, z):
        X = self._states(z)
        U = self._inputs(z)
        ce = np.empty((self.N, 4))
        prev = self.x0
        for j in range(self.N):
            ce[j] = X[j] - _rk4_step(prev, U[j], self.cfg.T_sL)
            prev = X[j]
        return ce.ravel()

    def eq_jacobian(self, z):
        X = self._states(z)
        U = self._inputs(z)
        rows, cols, vals = [], [], []
        prev = self.x0
        for j in range(self.N):
            _, Fx, Fu = _rk4_jacobians(prev, U[j], self.cfg.T_sL)
            r0 = 4 * j
            for i in range(4):
                rows.append(r0 + i)
                cols.append(4 * j + i)
                vals.append(1.0)
            if j >= 1:
                c0 = 4 * (j - 1)
                for i in range(4):
                    for k in range(4):
                        if Fx[i, k] != 0.0:
                            rows.append(r0 + i)
                            cols.append(c0 + k)
                            vals.append(-Fx[i, k])
            c0 = 4 * self.N + 2 * j
            for i in range(4):
                for k in range(2):
                    if Fu[i, k] != 0.0:
                        rows.append(r0 + i)
                        cols.append(c0 + k)
                        vals.append(-Fu[i, k])
            prev = X[j]
        return sp.coo_matrix((vals, (rows, cols)),
                             shape=(4 * self.N, self.n)).tocsr()

    # -- inequalities -------------------------------------------------------

    def _rate_pairs(self):
        """(index_prev, index_next, bound) triples of active input-rate
        limits; index -1 denotes the pre-horizon input."""
        out = []
        for comp, bound in ((0, self.cfg.delta_alpha_max),
                            (1, self.cfg.delta_omega_max)):
            if bound is None:
                continue
            if comp == 0 and self.alpha_prev is not None:
                out.append((-1, 0, comp, bound))
            for j in range(self.N - 1):
                out.append((j, j + 1, comp, bound))
        return out

    def ineq_constraints(self, z):
        X = self._states(z)
        U = self._inputs(z)
        vals = []
        eps = self.tvapf.epsilon_o
        O = self._field(X)
        vals.extend(O - eps)
        for jp, jn, comp, bound in self._rate_pairs():
            prev = self.alpha_prev if jp < 0 else U[jp, comp]
            diff = U[jn, comp] - prev
            vals.append(diff - bound)
            vals.append(-diff - bound)
        return np.array(vals)

    def ineq_jacobian(self, z):
        X = self._states(z)
        gs, gd = self._field_grad(X)
        j_idx = np.arange(self.N)
        rows = np.concatenate([j_idx, j_idx]).tolist()
        cols = np.concatenate([4 * j_idx, 4 * j_idx + 1]).tolist()
        vals = np.concatenate([gs, gd]).tolist()
        r = self.N
        for jp, jn, comp, bound in self._rate_pairs():
            i_next = 4 * self.N + 2 * jn + comp
            rows.extend((r, r + 1))
            cols.extend((i_next, i_next))
            vals.extend((1.0, -1.0))
            if jp >= 0:
                i_prev = 4 * self.N + 2 * jp + comp
                rows.extend((r, r + 1))
                cols.extend((i_prev, i_prev))
                vals.extend((-1.0, 1.0))
            r += 2
        m = self.N + 2 * len(self._rate_pairs())
        M = sp.coo_matrix((vals, (rows, cols)), shape=(m, self.n))
        # duplicate (row, col) entries from multiple obstacle fields sum
        return M.tocsr()

    def to_problem(self) -> NlpProblem:
        return NlpProblem(
            n=self.n,
            objective=self.objective,
            gradient=self.gradient,
            z0=self.z0,
            eq_constraints=self.eq_constraints,
            eq_jacobian=self.eq_jacobian,
            ineq_constraints=self.ineq_constraints,
            ineq_jacobian=self.ineq_jacobian,
            lb=self.lb,
            ub=self.ub,
            hessian=self.hessian,
        )


# -- public entry points ----------------------------------------------------


def solve_ltp(xi0: EgoModelState, forecasts, path: ReferencePath,
              cfg: PlannerConfig, potentials_cfg: PotentialConfig,
              tvapf: TvapfParams | None = None,
              warm_start: PlannedTrajectory | None = None,
              t0: float = 0.0,
              alpha_prev: float | None = None) -> PlannedTrajectory:
    """Solve one planner instance and return the published trajectory.

    Raises Infeasible when no feasible trajectory exists (callers fall back
    to safe_stop_trajectory) and EmptyTerminalSet when the safe-stop bound
    already lies behind the ego.
    """
    tvapf = tvapf or TvapfParams()
    guess_states, guess_inputs = _initial_guess(xi0, cfg, warm_start)
    d_center = None
    if warm_start is not None and not warm_start.fallback:
        d_center = path.lane_center(path.lane_index_of(guess_states[-1, 1]))
    leaders = _lane_leaders(forecasts, path, xi0)

    # Candidate terminal anchors.  The safe-stop bound must sit behind the
    # obstacle the ego ultimately stops behind, which depends on whether the
    # plan passes the nearest leader; both completions are posed as ordinary
    # continuous programs and the cheaper feasible one is published.
    candidates = []
    box0 = None
    try:
        box0 = _terminal_box(leaders, cfg, path, xi0, d_center)
        if leaders and (warm_start is None or warm_start.fallback):
            g_s, g_i = _follow_guess(xi0, leaders[0], box0, cfg)
        else:
            g_s, g_i = guess_states, guess_inputs
        candidates.append(("stay", box0, g_s, g_i))
    except EmptyTerminalSet:
        pass
    pass_attempted = False
    if leaders:
        horizon_reach = xi0.s + cfg.v_max * cfg.N_L * cfg.T_sL
        if box0 is None or box0.s_max < horizon_reach:
            try:
                box1 = _terminal_box(leaders[1:], cfg, path, xi0, None)
            except EmptyTerminalSet:
                box1 = None
            if box1 is not None and (box0 is None
                                     or box1.s_max > box0.s_max + 1.0):
                pg_states, pg_inputs = _pass_guess(xi0, leaders[0], cfg, path,
                                                   potentials_cfg)
                candidates.append(("pass", box1, pg_states, pg_inputs))
                pass_attempted = True
    if not candidates:
        raise EmptyTerminalSet(
            f"planner instance at t0={t0:.1f}s: no terminal anchor ahead of "
            f"ego s={xi0.s:.2f}")

    solved = []
    cand_stats = []
    for name, box, g_states, g_inputs in candidates:
        try:
            prog = _LtpProgram(xi0, forecasts, path, cfg, potentials_cfg,
                               tvapf, g_states, g_inputs, box, alpha_prev)
        except Infeasible:
            cand_stats.append({"candidate": name, "status": "empty_box"})
            continue
        result = solve(prog.to_problem(), cfg.solver)
        feasible = result.status in (SolveStatus.OPTIMAL,
                                     SolveStatus.FEASIBLE_POINT)
        U = prog._inputs(result.z)
        X = _rollout(xi0.as_array(), U, cfg.T_sL)
        overtakes = bool(any(path.lane_index_of(float(x[1])) > 0 for x in X))
        cand_stats.append({
            "candidate": name,
            "status": result.status.value,
            "objective": result.objective,
            "iterations": result.iterations,
            "wall_time": result.wall_time,
            "overtakes": overtakes,
        })
        if feasible:
            solved.append((float(result.objective), name, box, result, U, X))
    if not solved:
        raise Infeasible(
            f"planner instance at t0={t0:.1f}s: no feasible candidate "
            f"({[c['status'] for c in cand_stats]})")

    solved.sort(key=lambda item: (item[0], item[1]))
    obj, name, box, result, U, X = solved[0]

    # Published states re-integrate the optimal inputs so they satisfy the
    # dynamics exactly, not merely to solver tolerance.
    states = tuple(EgoModelState.from_array(x) for x in X)
    inputs = tuple(ControlInput(alpha=float(u[0]), omega=float(u[1]))
                   for u in U)
    stats = {
        "status": result.status.value,
        "candidate": name,
        "iterations": result.iterations,
        "objective": obj,
        "wall_time": sum(c.get("wall_time", 0.0) for c in cand_stats),
        "kkt_error": result.kkt_error,
        "constraint_violation": result.constraint_violation,
        "terminal_s_max": box.s_max,
        "overtake_feasible": (any(c.get("overtakes") and c["status"] in
                                  ("optimal", "feasible_point")
                                  for c in cand_stats)
                              if pass_attempted else None),
        "candidates": cand_stats,
    }
    return PlannedTrajectory(t0=t0, T_sL=cfg.T_sL, states=states,
                             inputs=inputs, solve_stats=stats)


def safe_stop_trajectory(xi0: EgoModelState, cfg: PlannerConfig,
                         t0: float = 0.0,
                         alpha_prev: float = 0.0) -> PlannedTrajectory:
    """Jerk-limited maximum-braking trajectory in the current lane.

    This is the always-available fallback the terminal-set construction
    guarantees: ramp the acceleration to its lower bound at the jerk limit,
    hold until stand-still, steer the heading to zero.
    """
    h = cfg.T_sL
    x = xi0.as_array()
    states = [x.copy()]
    inputs = []
    alpha = float(alpha_prev)
    for _ in range(cfg.N_L):
        alpha = max(alpha - cfg.j_max * h, cfg.alpha_min)
        a = alpha if x[3] > 1e-9 else 0.0
        # stop exactly at zero speed instead of integrating through it
        if x[3] + a * h < 0.0:
            a = -x[3] / h
        omega = float(np.clip(-x[2] / h, -cfg.omega_max, cfg.omega_max))
        u = np.array([a, omega])
        x = _rk4_step(x, u, h)
        x[3] = max(x[3], 0.0)
        states.append(x.copy())
        inputs.append(u)
    return PlannedTrajectory(
        t0=t0, T_sL=h,
        states=tuple(EgoModelState.from_array(xx) for xx in states),
        inputs=tuple(ControlInput(alpha=float(u[0]), omega=float(u[1]))
                     for u in inputs),
        solve_stats={"status": "fallback"},
        fallback=True)


def decision_label(traj: PlannedTrajectory, path: ReferencePath,
                   forecasts, v_des: float = 12.0) -> Decision:
    """Post-hoc classification of the emergent maneuver for logs and tests."""
    if traj.fallback:
        return Decision.SAFE_STOP
    lanes = {path.lane_index_of(x.d) for x in traj.states}
    if any(lane > 0 for lane in lanes):
        return Decision.OVERTAKE
    s0 = traj.states[0].s
    nu_end = traj.states[-1].nu
    has_leader = any(
        abs(fc.d_o - path.rightmost_lane_center) < 0.5 * path.lane_width
        and fc.s_center[0] > s0 and fc.direction > 0
        for fc in forecasts)
    if has_leader and nu_end < 0.9 * v_des:
        return Decision.FOLLOW_LEADER
    return Decision.KEEP_LANE
