"""Seeded data generators: pendulum on a cart, random stable systems, jump-linear and drifting LTV data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import DataError
from .numeric import LTIModel, Trajectory, matrices_to_params

# stream identifiers for make_rng
STREAM_INPUT, STREAM_PROCESS, STREAM_PARAM, STREAM_MEAS, STREAM_INIT = range(5)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


# ---------------------------------------------------------------------------
# pendulum on a cart


@dataclass(frozen=True)
class PendulumParams:
    g: float = 9.82
    l: float = 1.0
    d: float = 0.1
    dt: float = 0.01

    def __post_init__(self):
        if not self.l > 0:
            raise DataError("pendulum length must be positive")
        if not self.dt > 0:
            raise DataError("dt must be positive")
        if self.d < 0:
            raise DataError("damping must be nonnegative")


def pendulum_ode(s, u, p: PendulumParams):
    """Time derivative of ``(theta, theta_dot, pos, vel)`` under cart acceleration ``u``."""
    th, thd, _, v = s
    return np.array([thd, -(p.g / p.l) * np.sin(th) + (u / p.l) * np.cos(th) - p.d * thd, v, u])


def _ode_jac(s, u, p: PendulumParams):
    th = s[0]
    fx = np.zeros((4, 4))
    fx[0, 1] = 1.0
    fx[1, 0] = -(p.g / p.l) * np.cos(th) - (u / p.l) * np.sin(th)
    fx[1, 1] = -p.d
    fx[2, 3] = 1.0
    fu = np.array([[0.0], [np.cos(th) / p.l], [0.0], [1.0]])
    return fx, fu


def pendulum_step(state, u, params: PendulumParams = PendulumParams(), jacobian: bool = False):
    """One RK4 step of length ``params.dt``.

    With ``jacobian=True`` also returns the exact derivatives ``(Fx, Fu)`` of
    the discrete map, obtained by differentiating through the RK4 stages.
    """
    s = np.asarray(state, dtype=float)
    u = float(np.ravel(u)[0]) if np.ndim(u) else float(u)
    h = params.dt
    k1 = pendulum_ode(s, u, params)
    k2 = pendulum_ode(s + 0.5 * h * k1, u, params)
    k3 = pendulum_ode(s + 0.5 * h * k2, u, params)
    k4 = pendulum_ode(s + h * k3, u, params)
    nxt = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not jacobian:
        return nxt
    I = np.eye(4)
    f1x, f1u = _ode_jac(s, u, params)
    d1x, d1u = f1x, f1u
    f2x, f2u = _ode_jac(s + 0.5 * h * k1, u, params)
    d2x, d2u = f2x @ (I + 0.5 * h * d1x), f2x @ (0.5 * h * d1u) + f2u
    f3x, f3u = _ode_jac(s + 0.5 * h * k2, u, params)
    d3x, d3u = f3x @ (I + 0.5 * h * d2x), f3x @ (0.5 * h * d2u) + f3u
    f4x, f4u = _ode_jac(s + h * k3, u, params)
    d4x, d4u = f4x @ (I + h * d3x), f4x @ (h * d3u) + f4u
    Fx = I + h / 6 * (d1x + 2 * d2x + 2 * d3x + d4x)
    Fu = h / 6 * (d1u + 2 * d2u + 2 * d3u + d4u)
    return nxt, Fx, Fu


def pendulum_energy(state, params: PendulumParams = PendulumParams()) -> float:
    """Specific pendulum energy ``0.5 theta_dot^2 - (g/l) cos(theta)``."""
    return 0.5 * state[1] ** 2 - (params.g / params.l) * np.cos(state[0])


# ---------------------------------------------------------------------------
# linear generators


def random_stable_linear(n: int, dt: float, seed: int = 0, m: Optional[int] = None) -> LTIModel:
    """``A = expm(dt (A0 - A0' - dt I))`` with standard normal ``A0``; B is n x m (default n x n).

    Every eigenvalue of ``A`` has modulus ``exp(-dt^2)``.
    """
    if n < 1 or not dt > 0:
        raise DataError("need n >= 1 and dt > 0")
    rng = make_rng(seed, STREAM_INIT)
    A0 = rng.standard_normal((n, n))
    A = linalg.expm(dt * (A0 - A0.T - dt * np.eye(n)))
    B = rng.standard_normal((n, n if m is None else m))
    return LTIModel(A, B)


@dataclass(frozen=True)
class SimSpec:
    """Horizon, seed and noise levels; ``None`` picks the generator's default."""

    T: Optional[int] = None
    seed: int = 0
    sigma_e: Optional[float] = None  # equation (state-transition) noise, jump-linear
    sigma_v: Optional[float] = None  # state drift noise, drifting LTV
    sigma_w: Optional[float] = None  # parameter drift noise, drifting LTV
    sigma_meas: float = 0.0  # additive noise on the recorded states

    def __post_init__(self):
        if self.T is not None and self.T < 2:
            raise DataError("T must be at least 2")
        for name in ("sigma_e", "sigma_v", "sigma_w", "sigma_meas"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise DataError(f"{name} must be nonnegative")


@dataclass
class SimResult:
    traj: Trajectory
    A_seq: np.ndarray  # (T-1, n, n)
    B_seq: np.ndarray  # (T-1, n, m)
    breakpoints: list = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        """True parameter vectors, one row per transition."""
        return np.array([matrices_to_params(A, B) for A, B in zip(self.A_seq, self.B_seq)])


JUMP_A1 = np.array([[0.95, 0.1], [0.0, 0.95]])
JUMP_A2 = np.array([[0.5, 0.05], [0.0, 0.5]])
JUMP_B = np.array([[0.2], [1.0]])
JUMP_SWITCH = 200


def _simulate_linear(A_seq, B_seq, U, noise, x0):
    T = U.shape[0]
    x = np.zeros((T, A_seq.shape[1]))
    x[0] = x0
    for t in range(T - 1):
        x[t + 1] = A_seq[t] @ x[t] + B_seq[t] @ U[t] + noise[t]
    return x


def gen_jump_linear(spec: SimSpec = SimSpec()) -> SimResult:
    """Two-state system whose A matrix switches at transition 200.

    ``sigma_e`` (default 0.2) is added to every state transition; the
    optional ``sigma_meas`` perturbs the recorded states.
    """
    T = spec.T or 400
    sig = 0.2 if spec.sigma_e is None else spec.sigma_e
    U = make_rng(spec.seed, STREAM_INPUT).standard_normal((T, 1))
    E = sig * make_rng(spec.seed, STREAM_PROCESS).standard_normal((T - 1, 2))
    switch = min(JUMP_SWITCH, T - 1)
    A_seq = np.array([JUMP_A1 if t < switch else JUMP_A2 for t in range(T - 1)])
    B_seq = np.broadcast_to(JUMP_B, (T - 1, 2, 1)).copy()
    x = _simulate_linear(A_seq, B_seq, U, E, np.zeros(2))
    if spec.sigma_meas:
        x = x + spec.sigma_meas * make_rng(spec.seed, STREAM_MEAS).standard_normal(x.shape)
    bps = [switch] if switch < T - 1 else []
    return SimResult(Trajectory(x, U), A_seq, B_seq, bps)


def gen_drifting_ltv(spec: SimSpec = SimSpec(), n: int = 3, m: int = 2) -> SimResult:
    """Random-walk parameters ``k_{t+1} = k_t + w_t`` driving ``x_{t+1} = A_t x_t + B_t u_t + v_t``.

    Defaults: T = 500, sigma_v = 0.01, sigma_w = 0.001, unit-covariance inputs.
    The initial ``A`` is a random stable matrix with eigenvalue modulus
    ``exp(-0.09)``; the initial ``B`` is standard normal.
    """
    T = spec.T or 500
    sv = 0.01 if spec.sigma_v is None else spec.sigma_v
    sw = 0.001 if spec.sigma_w is None else spec.sigma_w
    base = random_stable_linear(n, 0.3, spec.seed, m)
    K = n * n + n * m
    W = sw * make_rng(spec.seed, STREAM_PARAM).standard_normal((T - 2, K))
    k = np.vstack([matrices_to_params(base.A, base.B), np.zeros((T - 2, K))])
    k[1:] = k[0] + np.cumsum(W, axis=0)
    AB = k.reshape(T - 1, n, n + m)
    A_seq, B_seq = AB[:, :, :n].copy(), AB[:, :, n:].copy()
    U = make_rng(spec.seed, STREAM_INPUT).standard_normal((T, m))
    V = sv * make_rng(spec.seed, STREAM_PROCESS).standard_normal((T - 1, n))
    x = _simulate_linear(A_seq, B_seq, U, V, np.zeros(n))
    if spec.sigma_meas:
        x = x + spec.sigma_meas * make_rng(spec.seed, STREAM_MEAS).standard_normal(x.shape)
    return SimResult(Trajectory(x, U), A_seq, B_seq)


def gen_pendulum(spec: SimSpec = SimSpec(), params: PendulumParams = PendulumParams(),
                 input_std: float = 1.0, x0=None) -> SimResult:
    """Pendulum-cart trajectory under Gaussian cart acceleration; A_seq/B_seq hold the exact Jacobians."""
    T = spec.T or 400
    U = input_std * make_rng(spec.seed, STREAM_INPUT).standard_normal((T, 1))
    x = np.zeros((T, 4))
    if x0 is not None:
        x[0] = x0
    A_seq = np.empty((T - 1, 4, 4))
    B_seq = np.empty((T - 1, 4, 1))
    for t in range(T - 1):
        x[t + 1], A_seq[t], B_seq[t] = pendulum_step(x[t], U[t, 0], params, jacobian=True)
    if spec.sigma_meas:
        x = x + spec.sigma_meas * make_rng(spec.seed, STREAM_MEAS).standard_normal(x.shape)
    return SimResult(Trajectory(x, U, params.dt), A_seq, B_seq)


def gen_random_linear(spec: SimSpec = SimSpec(), n: int = 10, dt: float = 0.02,
                      m: Optional[int] = None) -> tuple:
    """Trajectory of a random stable system under unit Gaussian inputs; returns ``(SimResult, LTIModel)``."""
    T = spec.T or 200
    sys = random_stable_linear(n, dt, spec.seed, m)
    U = make_rng(spec.seed, STREAM_INPUT).standard_normal((T, sys.m))
    sv = spec.sigma_v or 0.0
    V = sv * make_rng(spec.seed, STREAM_PROCESS).standard_normal((T - 1, n))
    A_seq = np.broadcast_to(sys.A, (T - 1, n, n)).copy()
    B_seq = np.broadcast_to(sys.B, (T - 1, n, sys.m)).copy()
    x = _simulate_linear(A_seq, B_seq, U, V, np.zeros(n))
    return SimResult(Trajectory(x, U, dt), A_seq, B_seq), sys
