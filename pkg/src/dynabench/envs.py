"""Analytic control environments: pendulum, cartpole swing-up, two-link reacher.

Each environment exposes a minimal-coordinate state, an over-parameterized
observation (every angle emitted as sin/cos), and dense rewards bounded to
[0, 1]. Dynamics are integrated with RK4 using internal substeps of at most
2 ms; the same stepper backs both the data-generating environment and the
ground-truth planning model, so there is no sim-to-sim gap.

All dynamics functions are vectorized over a leading batch axis.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Episode
from .errors import ConfigError, NumericError, StructuralError
from .numerics import Rng

MAX_SUBSTEP = 0.002  # seconds


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    obs_dim: int
    act_dim: int
    angle_indices: tuple        # state components that are angles
    dt_base: float = 0.01
    episode_length: int = 1000
    constants: dict = field(default_factory=dict)

    def with_overrides(self, overrides: dict) -> "EnvSpec":
        merged = dict(self.constants)
        for key, value in overrides.items():
            if key not in merged:
                raise ConfigError(f"unknown physical constant {key!r} for {self.name}")
            merged[key] = float(value)
        return replace(self, constants=merged)


@dataclass(frozen=True)
class RewardFn:
    """Smooth tolerance-shaped reward: exp(-0.5 * sum((feature/tol)^2)) times
    an action-cost factor exp(-c_u * mean(u^2)). Bounded to (0, 1]."""

    task: str
    tolerances: dict


# ---------------------------------------------------------------------------
# Per-environment dynamics (state derivative functions, batch-vectorized)
# ---------------------------------------------------------------------------

def _pendulum_deriv(c, state, action):
    # state: (N, 2) = (theta, theta_dot); theta = 0 hanging, pi upright
    theta = state[:, 0]
    omega = state[:, 1]
    torque = c["torque_scale"] * action[:, 0] - c["damping"] * omega
    alpha = (torque - c["m"] * c["g"] * c["l"] * np.sin(theta)) / (c["m"] * c["l"] ** 2)
    return np.stack([omega, alpha], axis=1)


def _cartpole_deriv(c, state, action):
    # state: (N, 4) = (x, theta, x_dot, theta_dot); theta = 0 upright
    theta = state[:, 1]
    x_dot = state[:, 2]
    omega = state[:, 3]
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    m_total = c["m_cart"] + c["m_pole"]
    ml = c["m_pole"] * c["l"]
    force = c["force_scale"] * action[:, 0] - c["damping_cart"] * x_dot
    tmp = (force + ml * omega * omega * sin_t) / m_total
    denom = c["l"] * (4.0 / 3.0 - c["m_pole"] * cos_t * cos_t / m_total)
    alpha = (c["g"] * sin_t - cos_t * tmp - c["damping_pole"] * omega / ml) / denom
    x_acc = tmp - ml * alpha * cos_t / m_total
    return np.stack([x_dot, omega, x_acc, alpha], axis=1)


def _reacher2_deriv(c, state, action):
    # state: (N, 4) = (q1, q2, q1_dot, q2_dot); planar two-link, no gravity
    q2 = state[:, 1]
    qd1 = state[:, 2]
    qd2 = state[:, 3]
    c2 = np.cos(q2)
    s2 = np.sin(q2)
    a1, a2, a3 = c["a1"], c["a2"], c["a3"]
    m11 = a1 + 2.0 * a2 * c2
    m12 = a3 + a2 * c2
    h = a2 * s2
    r1 = c["torque_scale"] * action[:, 0] - c["damping"] * qd1 + h * qd2 * (2.0 * qd1 + qd2)
    r2 = c["torque_scale"] * action[:, 1] - c["damping"] * qd2 - h * qd1 * qd1
    det = m11 * a3 - m12 * m12
    acc1 = (a3 * r1 - m12 * r2) / det
    acc2 = (m11 * r2 - m12 * r1) / det
    return np.stack([qd1, qd2, acc1, acc2], axis=1)


_DERIVS = {
    "pendulum": _pendulum_deriv,
    "cartpole_swingup": _cartpole_deriv,
    "reacher2": _reacher2_deriv,
}


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

_PENDULUM = EnvSpec(
    name="pendulum", state_dim=2, obs_dim=3, act_dim=1, angle_indices=(0,),
    constants={
        "m": 1.0, "l": 0.75, "g": 9.81, "damping": 0.05, "torque_scale": 2.5,
        "init_noise": 1.0,
    },
)

_CARTPOLE = EnvSpec(
    name="cartpole_swingup", state_dim=4, obs_dim=5, act_dim=1, angle_indices=(1,),
    constants={
        "m_cart": 1.0, "m_pole": 0.1, "l": 0.5, "g": 9.81,
        "damping_cart": 0.1, "damping_pole": 0.002, "force_scale": 10.0,
        "init_noise": 1.0,
    },
)

# a1/a2/a3 are the standard two-link inertia aggregates for uniform rods
# with masses m_i, lengths l_i, centers r_i = l_i / 2, I_i = m_i l_i^2 / 12.
_REACHER = EnvSpec(
    name="reacher2", state_dim=4, obs_dim=6, act_dim=2, angle_indices=(0, 1),
    constants={
        "l1": 0.4, "l2": 0.4, "a1": 0.2667, "a2": 0.08, "a3": 0.0533,
        "damping": 0.1, "torque_scale": 2.0, "init_noise": 1.0,
    },
)

_SPECS = {s.name: s for s in (_PENDULUM, _CARTPOLE, _REACHER)}

# Default task per env plus the alternate used for task-transfer studies.
ENV_TASKS = {
    "pendulum": ("swingup", "spin"),
    "cartpole_swingup": ("swingup", "balance"),
    "reacher2": ("reach_a", "reach_b"),
}

_REWARD_DEFAULTS = {
    ("pendulum", "swingup"): {"tol_angle": 0.4, "tol_omega": 4.0, "action_cost": 0.01},
    ("pendulum", "spin"): {"rate_target": 5.0, "tol_rate": 1.5, "action_cost": 0.01},
    ("cartpole_swingup", "swingup"): {
        "tol_angle": 0.35, "tol_x": 1.8, "tol_omega": 5.0, "action_cost": 0.01},
    ("cartpole_swingup", "balance"): {
        "tol_angle": 0.15, "tol_x": 0.5, "tol_omega": 2.0, "action_cost": 0.01},
    ("reacher2", "reach_a"): {
        "goal_x": 0.5, "goal_y": 0.3, "tol_dist": 0.08, "tol_speed": 4.0,
        "action_cost": 0.01},
    ("reacher2", "reach_b"): {
        "goal_x": -0.45, "goal_y": 0.35, "tol_dist": 0.08, "tol_speed": 4.0,
        "action_cost": 0.01},
}


def make_env_spec(name: str, overrides=None) -> EnvSpec:
    if name not in _SPECS:
        raise ConfigError(f"unknown env {name!r}; known: {sorted(_SPECS)}")
    spec = _SPECS[name]
    if overrides:
        spec = spec.with_overrides(overrides)
    return spec


def make_reward_fn(env_name: str, task: str, overrides=None) -> RewardFn:
    key = (env_name, task)
    if key not in _REWARD_DEFAULTS:
        known = [t for (e, t) in _REWARD_DEFAULTS if e == env_name]
        raise ConfigError(f"unknown task {task!r} for {env_name}; known: {known}")
    tol = dict(_REWARD_DEFAULTS[key])
    if overrides:
        for k, v in overrides.items():
            if k not in tol:
                raise ConfigError(f"unknown reward parameter {k!r} for task {task}")
            tol[k] = float(v)
    return RewardFn(task=task, tolerances=tol)


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def dynamics_step(spec: EnvSpec, state, action, dt: float):
    """RK4-integrate the analytic ODE for ``dt`` seconds (zero-order hold).

    state: (state_dim,) or (N, state_dim); action likewise. Substeps are
    capped at 2 ms so a composed sequence of short steps and one long step
    traverse identical substep grids.
    """
    if not 0.0 < dt <= 0.1:
        raise ConfigError(f"dt must lie in (0, 0.1], got {dt}")
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    squeeze = state.ndim == 1
    s = state.reshape(1, -1) if squeeze else state
    a = action.reshape(1, -1) if squeeze else action
    if s.shape[-1] != spec.state_dim or a.shape[-1] != spec.act_dim:
        raise StructuralError("state/action dims do not match spec")
    if not np.all(np.isfinite(s)):
        raise NumericError("dynamics_step: non-finite state")
    deriv = _DERIVS[spec.name]
    c = spec.constants
    n_sub = max(1, int(math.ceil(dt / MAX_SUBSTEP - 1e-9)))
    h = dt / n_sub
    for _ in range(n_sub):
        k1 = deriv(c, s, a)
        k2 = deriv(c, s + (0.5 * h) * k1, a)
        k3 = deriv(c, s + (0.5 * h) * k2, a)
        k4 = deriv(c, s + h * k3, a)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s[0] if squeeze else s


def observe(spec: EnvSpec, state):
    """Emit each angle as (sin, cos); pass the rest through."""
    state = np.asarray(state, dtype=np.float64)
    squeeze = state.ndim == 1
    s = state.reshape(1, -1) if squeeze else state
    cols = []
    for i in range(spec.state_dim):
        if i in spec.angle_indices:
            cols.append(np.sin(s[:, i]))
            cols.append(np.cos(s[:, i]))
        else:
            cols.append(s[:, i])
    obs = np.stack(cols, axis=-1)
    return obs[0] if squeeze else obs


def reconstruct_state(spec: EnvSpec, obs):
    """Inverse of ``observe`` up to angle wrapping into (-pi, pi]."""
    obs = np.asarray(obs, dtype=np.float64)
    squeeze = obs.ndim == 1
    o = obs.reshape(1, -1) if squeeze else obs
    cols = []
    j = 0
    for i in range(spec.state_dim):
        if i in spec.angle_indices:
            cols.append(np.arctan2(o[:, j], o[:, j + 1]))
            j += 2
        else:
            cols.append(o[:, j])
            j += 1
    state = np.stack(cols, axis=-1)
    return state[0] if squeeze else state


def _wrap_angle(x):
    return np.arctan2(np.sin(x), np.cos(x))


def reward(spec: EnvSpec, reward_fn: RewardFn, state, action):
    """Dense bounded reward in [0, 1]; vectorized over a leading batch axis."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    squeeze = state.ndim == 1
    s = state.reshape(1, -1) if squeeze else state
    a = action.reshape(1, -1) if squeeze else action
    tol = reward_fn.tolerances
    task = reward_fn.task
    if spec.name == "pendulum":
        if task == "swingup":
            d = _wrap_angle(s[:, 0] - np.pi) / tol["tol_angle"]
            w = s[:, 1] / tol["tol_omega"]
            quad = d * d + w * w
        elif task == "spin":
            d = (s[:, 1] - tol["rate_target"]) / tol["tol_rate"]
            quad = d * d
        else:
            raise ConfigError(f"unknown pendulum task {task!r}")
    elif spec.name == "cartpole_swingup":
        if task not in ("swingup", "balance"):
            raise ConfigError(f"unknown cartpole task {task!r}")
        d = _wrap_angle(s[:, 1]) / tol["tol_angle"]
        x = s[:, 0] / tol["tol_x"]
        w = s[:, 3] / tol["tol_omega"]
        quad = d * d + x * x + w * w
    elif spec.name == "reacher2":
        if task not in ("reach_a", "reach_b"):
            raise ConfigError(f"unknown reacher2 task {task!r}")
        c = spec.constants
        q1 = s[:, 0]
        q12 = s[:, 0] + s[:, 1]
        tip_x = c["l1"] * np.cos(q1) + c["l2"] * np.cos(q12)
        tip_y = c["l1"] * np.sin(q1) + c["l2"] * np.sin(q12)
        dist2 = (tip_x - tol["goal_x"]) ** 2 + (tip_y - tol["goal_y"]) ** 2
        speed2 = s[:, 2] ** 2 + s[:, 3] ** 2
        quad = dist2 / tol["tol_dist"] ** 2 + speed2 / tol["tol_speed"] ** 2
    else:
        raise ConfigError(f"unknown env {spec.name!r}")
    r = np.exp(-0.5 * quad - tol["action_cost"] * np.mean(a * a, axis=-1))
    return float(r[0]) if squeeze else r


def reward_from_obs(spec: EnvSpec, reward_fn: RewardFn, obs, action):
    """Reward evaluated on an observation (possibly off-manifold: the angle is
    recovered with atan2, which tolerates unnormalized sin/cos pairs)."""
    return reward(spec, reward_fn, reconstruct_state(spec, obs), action)


# Nominal start state and per-dimension reset half-widths (uniform noise).
_RESET = {
    "pendulum": (np.array([0.0, 0.0]), np.array([0.05, 0.05])),
    "cartpole_swingup": (np.array([0.0, np.pi, 0.0, 0.0]),
                         np.array([0.05, 0.05, 0.02, 0.02])),
    "reacher2": (np.array([0.0, 0.0, 0.0, 0.0]),
                 np.array([np.pi, np.pi, 0.05, 0.05])),
}


def reset(spec: EnvSpec, rng: Rng):
    """Sample an initial state: nominal + init_noise * halfwidth * U(-1, 1)."""
    nominal, halfwidth = _RESET[spec.name]
    scale = spec.constants.get("init_noise", 1.0)
    if scale == 0.0:
        return nominal.copy()
    u = rng.uniform(-1.0, 1.0, spec.state_dim)
    return nominal + scale * halfwidth * u


def goal_state(spec: EnvSpec, reward_fn: RewardFn):
    """A state maximizing the reward at zero action (used by tests)."""
    if spec.name == "pendulum":
        if reward_fn.task == "spin":
            return np.array([0.0, reward_fn.tolerances["rate_target"]])
        return np.array([np.pi, 0.0])
    if spec.name == "cartpole_swingup":
        return np.array([0.0, 0.0, 0.0, 0.0])
    # reacher2: solve two-link inverse kinematics for the goal point
    c = spec.constants
    gx, gy = reward_fn.tolerances["goal_x"], reward_fn.tolerances["goal_y"]
    d2 = gx * gx + gy * gy
    cos_q2 = (d2 - c["l1"] ** 2 - c["l2"] ** 2) / (2.0 * c["l1"] * c["l2"])
    q2 = math.acos(min(1.0, max(-1.0, cos_q2)))
    q1 = math.atan2(gy, gx) - math.atan2(c["l2"] * math.sin(q2),
                                         c["l1"] + c["l2"] * math.cos(q2))
    return np.array([q1, q2, 0.0, 0.0])


def run_episode(spec: EnvSpec, reward_fn: RewardFn, policy, length: int,
                rng: Rng) -> Episode:
    """Roll the environment for ``length`` steps at dt_base under ``policy``.

    policy(obs, t) -> action; actions are clamped to [-1, 1] before stepping.
    """
    if length < 1:
        raise ConfigError(f"episode length must be >= 1, got {length}")
    state = reset(spec, rng.fork("reset"))
    observations = np.empty((length + 1, spec.obs_dim))
    actions = np.empty((length, spec.act_dim))
    rewards = np.empty(length)
    for t in range(length):
        obs = observe(spec, state)
        observations[t] = obs
        action = np.asarray(policy(obs, t), dtype=np.float64).reshape(spec.act_dim)
        if not np.all(np.isfinite(action)):
            raise NumericError(f"policy returned non-finite action at step {t}")
        action = np.clip(action, -1.0, 1.0)
        actions[t] = action
        rewards[t] = reward(spec, reward_fn, state, action)
        state = dynamics_step(spec, state, action, spec.dt_base)
    observations[length] = observe(spec, state)
    return Episode(dt=spec.dt_base, observations=observations, actions=actions,
                   rewards=rewards)


def pendulum_energy(spec: EnvSpec, state):
    """Total mechanical energy of the pendulum (zero at hanging rest)."""
    c = spec.constants
    state = np.asarray(state, dtype=np.float64)
    theta, omega = state[..., 0], state[..., 1]
    return (0.5 * c["m"] * c["l"] ** 2 * omega ** 2
            + c["m"] * c["g"] * c["l"] * (1.0 - np.cos(theta)))
