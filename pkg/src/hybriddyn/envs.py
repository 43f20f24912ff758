"""Benchmark systems, data collection, a scripted swing-up expert and forecast metrics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import solve_continuous_are

from .data import Trajectory
from .errors import DimensionMismatch, DomainError, NonFinite, UnsupportedEnv

ENV_IDS = ("bouncing_ball", "pendulum_polar", "pendulum_cartesian",
           "cartpole_polar", "cartpole_cartesian", "cartpole_wall")


@dataclass(frozen=True)
class EnvSpec:
    id: str
    dt: float
    noise_std: float = 1e-3
    action_limit: float = 0.0
    mass: float = 1.0          # pendulum bob or pole mass
    length: float = 1.0
    gravity: float = 9.81
    damping: float = 0.05
    restitution: float = 0.8
    spring: float = 100.0
    wall_offset: float = 0.1
    cart_mass: float = 1.0

    def __post_init__(self):
        if self.id not in ENV_IDS:
            raise UnsupportedEnv(f"unknown environment {self.id!r}")
        if self.dt <= 0 or self.noise_std < 0:
            raise DomainError("dt must be positive and noise_std non-negative")

    @property
    def state_dim(self) -> int:
        return {"bouncing_ball": 2, "pendulum_polar": 2, "pendulum_cartesian": 3,
                "cartpole_polar": 4, "cartpole_cartesian": 5, "cartpole_wall": 4}[self.id]

    @property
    def action_dim(self) -> int:
        return 0 if self.id == "bouncing_ball" else 1

    @property
    def is_pendulum(self) -> bool:
        return self.id.startswith("pendulum")

    @property
    def is_cartpole(self) -> bool:
        return self.id.startswith("cartpole")


_DEFAULTS = {
    "bouncing_ball": dict(dt=0.05, noise_std=1e-3, action_limit=0.0),
    "pendulum_polar": dict(dt=0.01, action_limit=2.5),
    "pendulum_cartesian": dict(dt=0.01, action_limit=2.5),
    "cartpole_polar": dict(dt=0.01, action_limit=10.0, mass=0.1, length=0.5, damping=0.0),
    "cartpole_cartesian": dict(dt=0.01, action_limit=10.0, mass=0.1, length=0.5, damping=0.0),
    "cartpole_wall": dict(dt=0.01, action_limit=10.0, mass=0.1, length=0.5, damping=0.0),
}


def make_env(env_id: str, **overrides) -> EnvSpec:
    if env_id not in ENV_IDS:
        raise UnsupportedEnv(f"unknown environment {env_id!r}")
    cfg = dict(_DEFAULTS[env_id])
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return EnvSpec(id=env_id, **cfg)


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    info: dict = field(default_factory=dict)


def wrap_angle(th):
    return (np.asarray(th) + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# Coordinates: observations <-> internal generalized coordinates
# ---------------------------------------------------------------------------

def to_internal(spec: EnvSpec, obs) -> np.ndarray:
    s = np.asarray(obs, dtype=float)
    if s.shape != (spec.state_dim,):
        raise DimensionMismatch(f"{spec.id} expects a state of length {spec.state_dim}")
    if spec.id == "pendulum_cartesian":
        return np.array([np.arctan2(s[1], s[0]), s[2]])
    if spec.id == "cartpole_cartesian":
        return np.array([s[0], np.arctan2(s[2], s[1]), s[3], s[4]])
    return s.copy()


def to_obs(spec: EnvSpec, s: np.ndarray) -> np.ndarray:
    if spec.id == "pendulum_polar":
        return np.array([wrap_angle(s[0]), s[1]])
    if spec.id == "pendulum_cartesian":
        return np.array([np.cos(s[0]), np.sin(s[0]), s[1]])
    if spec.id == "cartpole_polar":
        return np.array([s[0], wrap_angle(s[1]), s[2], s[3]])
    if spec.id == "cartpole_cartesian":
        return np.array([s[0], np.cos(s[1]), np.sin(s[1]), s[2], s[3]])
    return s.copy()


# ---------------------------------------------------------------------------
# Vector fields (angles measured from upright)
# ---------------------------------------------------------------------------

def _pendulum_f(spec: EnvSpec, s: np.ndarray, u: float) -> np.ndarray:
    th, dth = s
    ml2 = spec.mass * spec.length ** 2
    ddth = (spec.gravity / spec.length) * np.sin(th) + (u - spec.damping * dth) / ml2
    return np.array([dth, ddth])


def wall_force(spec: EnvSpec, s: np.ndarray) -> float:
    tip = s[0] + spec.length * s[1]
    return -spec.spring * (tip - spec.wall_offset) if tip > spec.wall_offset else 0.0


def _cartpole_f(spec: EnvSpec, s: np.ndarray, u: float) -> np.ndarray:
    _, th, dx, dth = s
    M, m, l, g = spec.cart_mass, spec.mass, spec.length, spec.gravity
    if spec.id == "cartpole_wall":
        c, sn, cent = 1.0, th, 0.0
        fh = wall_force(spec, s)
    else:
        c, sn, cent = np.cos(th), np.sin(th), m * l * np.sin(th) * dth ** 2
        fh = 0.0
    mass = np.array([[M + m, m * l * c], [m * l * c, m * l * l]])
    rhs = np.array([u + fh + cent, m * g * l * sn + fh * l * c - spec.damping * dth])
    ddx, ddth = np.linalg.solve(mass, rhs)
    return np.array([dx, dth, ddx, ddth])


def vector_field(spec: EnvSpec, s: np.ndarray, u: float) -> np.ndarray:
    if spec.is_pendulum:
        return _pendulum_f(spec, s, u)
    if spec.is_cartpole:
        return _cartpole_f(spec, s, u)
    return np.array([s[1], -spec.gravity])


def rk4(f: Callable, s: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(s)
    k2 = f(s + 0.5 * dt * k1)
    k3 = f(s + 0.5 * dt * k2)
    k4 = f(s + dt * k3)
    return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _ball_flight(spec: EnvSpec, s: np.ndarray) -> tuple[np.ndarray, bool]:
    """Exact ballistic flight over one step with restitution impacts at h = 0."""
    h, v = float(s[0]), float(s[1])
    g, rem, impact = spec.gravity, spec.dt, False
    for _ in range(100):
        if h <= 0.0 and v <= 0.0:
            h, v = 0.0, 0.0
            break
        t_hit = (v + np.sqrt(v * v + 2.0 * g * max(h, 0.0))) / g
        if t_hit >= rem:
            h, v = h + v * rem - 0.5 * g * rem ** 2, v - g * rem
            break
        v = -spec.restitution * (v - g * t_hit)
        h, rem, impact = 0.0, rem - t_hit, True
        if v < 1e-3:
            h, v = 0.0, 0.0
            break
    return np.array([h, v]), impact


def reward(spec: EnvSpec, s: np.ndarray, u: float) -> float:
    """Declared task rewards on internal coordinates."""
    if spec.is_pendulum:
        return -(wrap_angle(s[0]) ** 2 + 0.1 * s[1] ** 2 + 1e-3 * u ** 2)
    if spec.is_cartpole:
        return -(s[0] ** 2 + wrap_angle(s[1]) ** 2 + 0.1 * (s[2] ** 2 + s[3] ** 2) + 1e-3 * u ** 2)
    return 0.0


def env_step(spec: EnvSpec, state, action, rng=None) -> StepResult:
    s = to_internal(spec, state)
    u = 0.0
    if spec.action_dim:
        u = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0],
                          -spec.action_limit, spec.action_limit))
    info: dict = {}
    r = reward(spec, s, u)
    if spec.id == "bouncing_ball":
        nxt, info["impact"] = _ball_flight(spec, s)
    else:
        nxt = rk4(lambda y: vector_field(spec, y, u), s, spec.dt)
        if spec.id == "cartpole_wall":
            info["contact"] = wall_force(spec, nxt) != 0.0
    obs = to_obs(spec, nxt)
    if spec.noise_std > 0:
        rng = np.random.default_rng(rng)
        obs = obs + spec.noise_std * rng.standard_normal(obs.shape)
        if spec.id == "pendulum_cartesian":
            obs = to_obs(spec, to_internal(spec, obs))
        elif spec.id == "cartpole_cartesian":
            obs = to_obs(spec, to_internal(spec, obs))
        elif spec.id == "pendulum_polar":
            obs[0] = wrap_angle(obs[0])
        elif spec.id == "cartpole_polar":
            obs[1] = wrap_angle(obs[1])
    if spec.id == "bouncing_ball":
        obs[0] = abs(obs[0])
    if not np.all(np.isfinite(obs)) or np.max(np.abs(obs)) > 1e6:
        raise NonFinite(f"{spec.id}: state diverged")
    return StepResult(obs, float(r), info)


# ---------------------------------------------------------------------------
# Initial-state distributions and policies
# ---------------------------------------------------------------------------

def default_init(spec: EnvSpec) -> Callable:
    """Broad initial distribution used for system identification."""
    def draw(rng):
        if spec.id == "bouncing_ball":
            s = np.array([rng.uniform(1.0, 3.0), rng.uniform(-2.0, 2.0)])
        elif spec.is_pendulum:
            s = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-2.0, 2.0)])
        elif spec.id == "cartpole_wall":
            s = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.0, 0.0])
        else:
            s = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-np.pi, np.pi), 0.0, 0.0])
        return to_obs(spec, s)
    return draw


def hanging_init(spec: EnvSpec, spread: float = 0.1) -> Callable:
    """Near the hanging equilibrium, used for swing-up tasks."""
    def draw(rng):
        th = np.pi + rng.uniform(-spread, spread)
        if spec.is_pendulum:
            s = np.array([th, rng.uniform(-spread, spread)])
        else:
            s = np.array([0.0, th, 0.0, 0.0])
        return to_obs(spec, s)
    return draw


def random_policy(spec: EnvSpec) -> Callable:
    def act(x, rng):
        return rng.uniform(-spec.action_limit, spec.action_limit, size=spec.action_dim)
    return act


@lru_cache(maxsize=32)
def lqr_gain(spec: EnvSpec, q=(1.0, 0.1), r: float = 0.1) -> np.ndarray:
    """Continuous-time LQR gain around the upright equilibrium (internal coordinates)."""
    n = 2 if spec.is_pendulum else 4
    s0 = np.zeros(n)
    eps = 1e-6
    A = np.column_stack([(vector_field(spec, s0 + eps * e, 0.0)
                          - vector_field(spec, s0 - eps * e, 0.0)) / (2 * eps) for e in np.eye(n)])
    B = ((vector_field(spec, s0, eps) - vector_field(spec, s0, -eps)) / (2 * eps))[:, None]
    Q = np.diag(q if len(q) == n else np.ones(n))
    P = solve_continuous_are(A, B, Q, np.array([[r]]))
    return (B.T @ P / r).ravel()


def scripted_expert(spec: EnvSpec, state) -> np.ndarray:
    """Energy-pumping swing-up with LQR stabilization near the upright."""
    if not (spec.is_pendulum or spec.is_cartpole):
        raise UnsupportedEnv(f"no scripted expert for {spec.id!r}")
    s = to_internal(spec, state)
    lim = spec.action_limit
    if spec.is_pendulum:
        th, dth = wrap_angle(s[0]), s[1]
        ml2 = spec.mass * spec.length ** 2
        mgl = spec.mass * spec.gravity * spec.length
        energy = 0.5 * ml2 * dth ** 2 + mgl * (np.cos(th) - 1.0)
        if abs(th) < 0.5 and abs(energy) < 0.25 * mgl:
            u = -lqr_gain(spec) @ np.array([th, dth])
        else:
            # smooth pumping: power u * dth has the sign of the energy deficit
            u = lim * np.tanh(-2.0 * energy / mgl * dth) + spec.damping * dth
            if abs(dth) < 1e-3 and energy < -1e-3:
                u = lim
        return np.array([float(np.clip(u, -lim, lim))])
    x, th, dx, dth = s[0], wrap_angle(s[1]), s[2], s[3]
    z = np.array([x, th, dx, dth])
    if spec.id == "cartpole_wall" or abs(th) < 0.4:
        u = -lqr_gain(spec, (1.0, 1.0, 0.1, 0.1), 0.1) @ z
    else:
        m, l, g = spec.mass, spec.length, spec.gravity
        energy = 0.5 * m * l * l * dth ** 2 + m * g * l * (np.cos(th) - 1.0)
        # cart acceleration pumps the pole energy; weak centering on the cart
        u = 5.0 * energy * dth * np.cos(th) / (m * g * l) - 0.5 * x - 0.5 * dx
        if abs(dth) < 1e-3 and abs(energy) > 1e-3:
            u = lim
    return np.array([float(np.clip(u, -lim, lim))])


def expert_policy(spec: EnvSpec, noise_std: float = 0.0) -> Callable:
    def act(x, rng):
        u = scripted_expert(spec, x)
        if noise_std > 0:
            u = u + noise_std * rng.standard_normal(u.shape)
        return u
    return act


def rollout(spec: EnvSpec, policy: Callable, T: int, x0, rng, traj_id: str = ""):
    """One trajectory of length T; returns (Trajectory, rewards)."""
    if hasattr(policy, "reset"):
        policy.reset()
    x = np.zeros((T, spec.state_dim))
    u = np.zeros((T, spec.action_dim))
    r = np.zeros(T)
    x[0] = x0
    for t in range(T):
        if spec.action_dim:
            u[t] = np.asarray(policy(x[t], rng), dtype=float).reshape(spec.action_dim)
            u[t] = np.clip(u[t], -spec.action_limit, spec.action_limit)
        step = env_step(spec, x[t], u[t], rng)
        r[t] = step.reward
        if t + 1 < T:
            x[t + 1] = step.next_state
    return Trajectory(x, u, spec.dt, 1.0, traj_id, spec.id), r


def collect_trajectories(spec: EnvSpec, policy, N: int, T: int, init_distribution=None,
                         rng=None) -> list[Trajectory]:
    """N seeded rollouts of length T; ``policy`` may be "random", "expert" or a callable."""
    if N < 1 or T < 1:
        raise DomainError("N and T must be positive")
    if isinstance(policy, str):
        policy = {"random": random_policy, "expert": expert_policy}[policy](spec)
    init = init_distribution or default_init(spec)
    rng = np.random.default_rng(rng)
    seeds = rng.integers(0, 2 ** 63 - 1, size=N)
    out = []
    for n, seed in enumerate(seeds):
        r = np.random.default_rng(seed)
        traj, _ = rollout(spec, policy, T, init(r), r, str(n))
        out.append(traj)
    return out


def swing_up_success(spec: EnvSpec, traj: Trajectory, final_seconds: float = 1.0,
                     threshold: float = 0.2) -> bool:
    """True when the angle stays within ``threshold`` of upright over the final window."""
    n = max(1, int(round(final_seconds / spec.dt)))
    th = np.array([wrap_angle(to_internal(spec, s)[0 if spec.is_pendulum else 1])
                   for s in traj.x[-n:]])
    return bool(np.all(np.abs(th) < threshold))


# ---------------------------------------------------------------------------
# Forecast metrics and the single-affine baseline
# ---------------------------------------------------------------------------

def nmse(predictions, truth, normalizer) -> float:
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    y = np.atleast_2d(np.asarray(truth, dtype=float))
    var = np.asarray(normalizer, dtype=float)
    if p.shape != y.shape or var.shape[-1:] != p.shape[-1:]:
        raise DimensionMismatch("predictions, truth and normalizer shapes disagree")
    if np.any(var <= 0):
        raise DomainError("normalizer must be positive")
    return float(np.mean(np.mean((p - y) ** 2, axis=0) / var))


@dataclass
class AffineModel:
    """Single global affine model x' = W [x, u, 1], fit by least squares."""

    W: np.ndarray

    @classmethod
    def fit(cls, dataset) -> "AffineModel":
        X = np.concatenate([np.hstack([t.x[:-1], t.u[:-1], np.ones((len(t) - 1, 1))])
                            for t in dataset])
        Y = np.concatenate([t.x[1:] for t in dataset])
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
        return cls(W.T)

    def predict(self, x, controls) -> np.ndarray:
        out, x = [], np.asarray(x, dtype=float)
        for u in np.atleast_2d(controls):
            x = self.W @ np.concatenate([x, u, [1.0]])
            out.append(x)
        return np.array(out)

    def forecast_sweep(self, traj: Trajectory, horizons) -> dict[int, np.ndarray]:
        horizons = sorted(set(int(h) for h in horizons))
        hmax, T = max(horizons), len(traj)
        errs = {h: [] for h in horizons}
        for t in range(T - min(horizons)):
            steps = min(hmax, T - 1 - t)
            pred = self.predict(traj.x[t], traj.u[t:t + steps].reshape(steps, -1))
            for h in horizons:
                if h <= steps:
                    errs[h].append((pred[h - 1] - traj.x[t + h]) ** 2)
        d = traj.state_dim
        return {h: np.array(v).reshape(-1, d) for h, v in errs.items()}


def sweep_nmse(errors: dict[int, np.ndarray], variance) -> dict[int, float]:
    """Per-horizon NMSE from squared-error arrays."""
    var = np.asarray(variance, dtype=float)
    return {h: float(np.mean(e.mean(axis=0) / var)) if e.size else float("nan")
            for h, e in errors.items()}
