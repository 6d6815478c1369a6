"""CEM-based model-predictive control.

Candidates are control-point matrices linearly interpolated into full-rate
action sequences. Exploration noise is temporally colored (power spectral
density ~ 1/f^beta along the control-point axis), synthesized with an
explicit orthonormal real-DFT basis so beta = 0 is exactly i.i.d. Gaussian.
Candidate returns average the per-member rollouts of an ensemble, with the
member fixed per rollout.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .dataset import Episode
from .errors import ConfigError, NumericError, StructuralError
from .numerics import Rng


@dataclass(frozen=True)
class PlannerConfig:
    horizon_s: float = 1.0
    control_spacing_s: float = 0.04
    particles: int = 150
    iterations: int = 1
    elite_frac: float = 0.1
    sigma_explore: float = 0.5
    beta: float = 2.0
    argmax: bool = True
    replan_s: float = 0.02
    warm_start: bool = True

    def __post_init__(self):
        if self.particles < 2 or self.iterations < 1:
            raise ConfigError("need particles >= 2 and iterations >= 1")
        if self.horizon_s <= 0 or self.control_spacing_s <= 0:
            raise ConfigError("horizon and control spacing must be positive")
        if self.beta < 0:
            raise ConfigError("colored-noise exponent beta must be >= 0")

    def horizon_steps(self, dt_model):
        steps = int(round(self.horizon_s / dt_model))
        if steps < 1 or abs(steps * dt_model - self.horizon_s) > 1e-9:
            raise ConfigError(
                f"horizon {self.horizon_s}s is not a whole number of model "
                f"steps at dt={dt_model}")
        return steps

    def n_control_points(self, dt_model):
        if self.control_spacing_s < dt_model - 1e-12:
            raise ConfigError("control spacing must be >= model dt")
        return int(math.floor(self.horizon_s / self.control_spacing_s + 1e-9)) + 1

    @property
    def elite_count(self):
        return max(1, int(math.ceil(self.elite_frac * self.particles)))


@dataclass
class Plan:
    control_points: np.ndarray      # (C, act_dim)
    actions: np.ndarray             # (H, act_dim) at model-step times
    expected_return: float
    expected_step_rewards: np.ndarray  # (H,), member-averaged, chosen candidate
    particle_returns: np.ndarray    # final-iteration candidate returns
    horizon_s: float
    span_s: float                   # (H-1) * dt_model: time of the last step start
    dt_model: float
    n_members: int
    all_dead: bool = False

    def action_at(self, tau: float):
        """Sample the control-point interpolant ``tau`` seconds after the plan
        start. The control grid spans the step-start times [0, span_s], so at
        tau = j * dt_model this returns exactly actions[j]."""
        c = self.control_points.shape[0]
        if c == 1:
            return self.control_points[0].copy()
        u = 0.0 if self.span_s <= 0 else min(max(tau / self.span_s, 0.0), 1.0)
        pos = u * (c - 1)
        lo = min(int(pos), c - 2)
        frac = pos - lo
        return (1.0 - frac) * self.control_points[lo] \
            + frac * self.control_points[lo + 1]


@dataclass
class DiscrepancyLog:
    """Expected vs realized return over the planner horizon per replan time."""

    horizon_steps: int
    dt_multiple: int               # model steps to base steps
    entries: list = field(default_factory=list)
    aborted: bool = False

    def log_plan(self, t_base: int, expected_step_rewards):
        self.entries.append({"t": t_base,
                             "expected": np.asarray(expected_step_rewards),
                             "realized": None})

    def fill_realized(self, episode: Episode):
        """Realized per-model-step rewards sampled from the executed episode,
        truncated at the episode end."""
        k = self.dt_multiple
        for entry in self.entries:
            idx = entry["t"] + k * np.arange(self.horizon_steps)
            idx = idx[idx < episode.length]
            entry["realized"] = episode.rewards[idx]


# ---------------------------------------------------------------------------
# Colored noise
# ---------------------------------------------------------------------------

_BASIS_CACHE = {}


def _noise_basis(n: int):
    """Orthonormal real-DFT synthesis basis (n x n) and the frequency of each
    column. Columns: DC, then (cos, sin) pairs, then Nyquist for even n."""
    if n in _BASIS_CACHE:
        return _BASIS_CACHE[n]
    t = np.arange(n)
    cols = [np.full(n, 1.0 / math.sqrt(n))]
    freqs = [0.0]
    for m in range(1, (n - 1) // 2 + 1):
        w = 2.0 * np.pi * m * t / n
        cols.append(math.sqrt(2.0 / n) * np.cos(w))
        cols.append(math.sqrt(2.0 / n) * np.sin(w))
        freqs.extend([m / n, m / n])
    if n % 2 == 0 and n >= 2:
        cols.append(np.cos(np.pi * t) / math.sqrt(n))
        freqs.append(0.5)
    basis = np.stack(cols, axis=1)
    freqs = np.asarray(freqs)
    _BASIS_CACHE[n] = (basis, freqs)
    return basis, freqs


def sample_colored_noise(rng: Rng, beta: float, n_points: int, act_dim: int,
                         sigma: float, count: int = None):
    """Noise with PSD ~ 1/f^beta along the point axis, normalized so every
    point has standard deviation ``sigma`` exactly (analytic normalization).

    Returns (n_points, act_dim), or (count, n_points, act_dim) when ``count``
    is given. beta = 0 reduces to i.i.d. Gaussian.
    """
    if n_points < 1:
        raise ConfigError("need at least one control point")
    basis, freqs = _noise_basis(n_points)
    if beta == 0.0:
        scale = np.ones(len(freqs))
    else:
        scale = np.empty(len(freqs))
        positive = freqs > 0
        scale[positive] = freqs[positive] ** (-beta / 2.0)
        # DC keeps the lowest positive frequency's weight (fmin convention)
        scale[~positive] = (1.0 / n_points) ** (-beta / 2.0) if n_points > 1 else 1.0
    # per-point variance is column-weight invariant: s0^2/n + sum 2 sm^2/n (+ Nyq)
    var = float(np.sum((basis ** 2) * (scale ** 2)[None, :], axis=1)[0])
    synth = basis * (scale * (sigma / math.sqrt(var)))[None, :]
    m = len(freqs)
    if count is None:
        z = rng.gaussian((act_dim, m))
        return (z @ synth.T).T
    z = rng.gaussian((count, act_dim, m))
    return np.einsum("cam,pm->cpa", z, synth)


# ---------------------------------------------------------------------------
# Interpolation and evaluation
# ---------------------------------------------------------------------------

def interpolate_controls(control_points, horizon_steps: int):
    """Piecewise-linear interpolation of control points placed uniformly over
    the horizon; step i samples the interpolant at i/(H-1). Accepts (C, da)
    or batched (P, C, da); output is clamped to [-1, 1]."""
    cp = np.asarray(control_points, dtype=np.float64)
    squeeze = cp.ndim == 2
    if squeeze:
        cp = cp[None]
    p, c, da = cp.shape
    if horizon_steps < 1:
        raise ConfigError("horizon_steps must be >= 1")
    if c == 1:
        out = np.broadcast_to(cp, (p, horizon_steps, da)).copy()
    else:
        # step i samples at i * (c-1)/(H-1); exact when the grids coincide
        if horizon_steps > 1:
            pos = np.arange(horizon_steps) * ((c - 1) / (horizon_steps - 1))
        else:
            pos = np.zeros(1)
        lo = np.minimum(pos.astype(np.int64), c - 2)
        frac = pos - lo
        out = (cp[:, lo, :] * (1.0 - frac)[None, :, None]
               + cp[:, lo + 1, :] * frac[None, :, None])
    out = np.clip(out, -1.0, 1.0)
    return out[0] if squeeze else out


def evaluate_plans(model, spec, reward_fn, obs0, control_sets,
                   horizon_steps: int, rng: Rng):
    """Expected return of each candidate control-point set.

    Every candidate is rolled out once per ensemble member (member fixed for
    the whole rollout; deterministic members in mean mode, stochastic in
    sample mode) and the per-member returns are averaged. Dead-rollout steps
    contribute zero reward.

    Returns (returns (P,), step_rewards (P, H), alive (P,)); a candidate is
    alive when at least one of its member rollouts predicted past step 1.
    """
    control_sets = np.asarray(control_sets, dtype=np.float64)
    if control_sets.ndim != 3:
        raise StructuralError("control_sets must be (P, C, act_dim)")
    p = control_sets.shape[0]
    e = model.n_members
    actions = interpolate_controls(control_sets, horizon_steps)  # (P, H, da)
    acts_tiled = np.tile(actions, (e, 1, 1))
    obs_tiled = np.broadcast_to(np.asarray(obs0, dtype=np.float64),
                                (e * p, model.obs_dim))
    member_ids = np.repeat(np.arange(e), p)
    mode = "sample" if model.is_stochastic else "mean"
    traj, dead_from = model.rollout(obs_tiled, acts_tiled, member_ids, mode,
                                    rng.fork("rollout") if rng else None)
    h = horizon_steps
    flat_obs = traj[:, :h].reshape(-1, model.obs_dim)
    flat_act = acts_tiled.reshape(-1, model.act_dim)
    with np.errstate(invalid="ignore"):
        rewards = envs.reward_from_obs(spec, reward_fn, flat_obs, flat_act)
    rewards = rewards.reshape(e * p, h)
    valid = np.arange(h)[None, :] < dead_from[:, None]
    rewards = np.where(valid & np.isfinite(rewards), rewards, 0.0)
    step_rewards = rewards.reshape(e, p, h).mean(axis=0)
    alive = (dead_from > 1).reshape(e, p).any(axis=0) if h > 0 \
        else np.ones(p, dtype=bool)
    return step_rewards.sum(axis=1), step_rewards, alive


def cem_plan(cfg: PlannerConfig, model, spec, reward_fn, obs0,
             previous_plan: Plan = None, rng: Rng = None) -> Plan:
    """One planning call: sample, evaluate, refit; argmax or final mean."""
    obs0 = np.asarray(obs0, dtype=np.float64)
    if not np.all(np.isfinite(obs0)):
        raise NumericError("cem_plan: non-finite observation")
    rng = rng or Rng(0)
    dt_model = model.dt
    h = cfg.horizon_steps(dt_model)
    c = cfg.n_control_points(dt_model)
    da = model.act_dim
    span = (h - 1) * dt_model

    mean = np.zeros((c, da))
    if cfg.warm_start and previous_plan is not None and c > 1:
        for i in range(c):
            tau = i * span / (c - 1) + cfg.replan_s
            if tau <= previous_plan.span_s + 1e-12:
                mean[i] = previous_plan.action_at(tau)
    std = np.full((c, da), cfg.sigma_explore)

    best_return = -np.inf
    best_points = None
    best_steps = None
    last_returns = None
    any_alive = False
    for it in range(cfg.iterations):
        noise = sample_colored_noise(rng.fork(f"noise/{it}"), cfg.beta, c, da,
                                     1.0, count=cfg.particles)
        candidates = np.clip(mean[None] + noise * std[None], -1.0, 1.0)
        returns, step_rewards, alive = evaluate_plans(
            model, spec, reward_fn, obs0, candidates, h, rng.fork(f"eval/{it}"))
        last_returns = returns
        any_alive = any_alive or bool(alive.any())
        top = int(np.argmax(returns))
        if returns[top] > best_return:
            best_return = float(returns[top])
            best_points = candidates[top].copy()
            best_steps = step_rewards[top].copy()
        elite_idx = np.argsort(-returns)[:cfg.elite_count]
        elites = candidates[elite_idx]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), 1e-6)

    if not any_alive:
        zero = np.zeros((c, da))
        return Plan(control_points=zero,
                    actions=interpolate_controls(zero, h),
                    expected_return=0.0,
                    expected_step_rewards=np.zeros(h),
                    particle_returns=last_returns,
                    horizon_s=cfg.horizon_s, span_s=span, dt_model=dt_model,
                    n_members=model.n_members, all_dead=True)

    if cfg.argmax:
        chosen, chosen_return, chosen_steps = best_points, best_return, best_steps
    else:
        chosen = np.clip(mean, -1.0, 1.0)
        ret, steps, _ = evaluate_plans(model, spec, reward_fn, obs0,
                                       chosen[None], h, rng.fork("final_mean"))
        chosen_return, chosen_steps = float(ret[0]), steps[0]
    return Plan(control_points=chosen,
                actions=interpolate_controls(chosen, h),
                expected_return=chosen_return,
                expected_step_rewards=chosen_steps,
                particle_returns=last_returns,
                horizon_s=cfg.horizon_s, span_s=span, dt_model=dt_model,
                n_members=model.n_members)


def mpc_episode(cfg: PlannerConfig, spec, reward_fn, model, episode_len=None,
                rng: Rng = None, initial_state=None):
    """Closed-loop MPC on the real environment.

    Replans every ``replan_s`` seconds from the current observation only,
    executes the plan interpolant resampled at dt_base, and logs expected vs
    (later) realized return over the planner horizon at every replan.

    Returns (Episode, DiscrepancyLog).
    """
    rng = rng or Rng(0)
    length = episode_len or spec.episode_length
    n_replan = int(round(cfg.replan_s / spec.dt_base))
    if n_replan < 1 or abs(n_replan * spec.dt_base - cfg.replan_s) > 1e-9:
        raise ConfigError("replan interval must be a positive multiple of dt_base")
    k = int(round(model.dt / spec.dt_base))
    if k < 1 or abs(k * spec.dt_base - model.dt) > 1e-9:
        raise ConfigError("model dt must be a positive multiple of dt_base")

    state = initial_state if initial_state is not None \
        else envs.reset(spec, rng.fork("reset"))
    log = DiscrepancyLog(horizon_steps=cfg.horizon_steps(model.dt), dt_multiple=k)
    observations = np.empty((length + 1, spec.obs_dim))
    actions = np.empty((length, spec.act_dim))
    rewards = np.empty(length)
    plan = None
    t0 = 0
    executed = 0
    try:
        for t in range(length):
            obs = envs.observe(spec, state)
            observations[t] = obs
            if t % n_replan == 0:
                plan = cem_plan(cfg, model, spec, reward_fn, obs, plan,
                                rng.fork(f"plan/{t}"))
                t0 = t
                log.log_plan(t, plan.expected_step_rewards)
            action = np.clip(plan.action_at((t - t0) * spec.dt_base), -1.0, 1.0)
            actions[t] = action
            rewards[t] = envs.reward(spec, reward_fn, state, action)
            state = envs.dynamics_step(spec, state, action, spec.dt_base)
            executed = t + 1
        observations[length] = envs.observe(spec, state)
    except NumericError:
        log.aborted = True
        episode = Episode(dt=spec.dt_base,
                          observations=observations[:executed + 1],
                          actions=actions[:executed],
                          rewards=rewards[:executed])
        log.fill_realized(episode)
        return episode, log
    episode = Episode(dt=spec.dt_base, observations=observations,
                      actions=actions, rewards=rewards)
    log.fill_realized(episode)
    return episode, log
