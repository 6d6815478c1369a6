"""Metrics: normalized reward, k-step NMSE, reward-discrepancy statistics,
open-loop divergence rate, and task-transfer evaluation."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Episode
from .errors import ConfigError, StructuralError
from .models import Ensemble
from .numerics import Rng

POSITIVE_EPS = 1e-9  # float noise guard when counting positive discrepancies


@dataclass
class MetricReport:
    """Per-run metric bundle; over-seed percentiles live in the grid table."""

    normalized_rewards: list = field(default_factory=list)  # per episode
    kstep_nmse: float = None
    discrepancy: dict = None
    divergence_rate: float = None
    partial: bool = False

    @property
    def reward_mean(self):
        return float(np.mean(self.normalized_rewards)) \
            if self.normalized_rewards else None

    def to_dict(self):
        return {"normalized_rewards": [float(r) for r in self.normalized_rewards],
                "reward_mean": self.reward_mean,
                "kstep_nmse": self.kstep_nmse,
                "discrepancy": self.discrepancy,
                "divergence_rate": self.divergence_rate,
                "partial": self.partial}


def normalized_reward(episode: Episode) -> float:
    """1000 * (sum of per-step rewards) / episode length; range [0, 1000]."""
    return 1000.0 * float(np.sum(episode.rewards)) / episode.length


def _nmse_windows(model, episodes, k_steps, k_mult, max_windows):
    """Gather (start_obs, action windows, target windows) across episodes,
    skipping episodes shorter than the window with a warning."""
    span = k_steps * k_mult
    starts, acts, targets = [], [], []
    skipped = 0
    t_off = k_mult * np.arange(1, k_steps + 1) - 1
    a_off = k_mult * np.arange(k_steps)[:, None] + np.arange(k_mult)[None, :]
    for ep in episodes:
        if ep.length < span:
            skipped += 1
            continue
        s = np.arange(ep.length - span + 1)
        starts.append(ep.observations[s])
        targets.append(ep.observations[1:][s[:, None] + t_off[None, :]])
        acts.append(ep.actions[s[:, None, None] + a_off[None, :, :]].mean(axis=2))
    if skipped:
        warnings.warn(f"kstep_nmse: skipped {skipped} episodes shorter than "
                      f"{span} steps")
    if not starts:
        raise StructuralError("kstep_nmse: no episode long enough for the window")
    starts = np.concatenate(starts, axis=0)
    acts = np.concatenate(acts, axis=0)
    targets = np.concatenate(targets, axis=0)
    if max_windows and len(starts) > max_windows:
        pick = np.linspace(0, len(starts) - 1, max_windows).astype(np.int64)
        starts, acts, targets = starts[pick], acts[pick], targets[pick]
    return starts, acts, targets


def kstep_nmse(model, test_episodes, duration: float = 0.5, stats=None,
               max_windows: int = 0, ensemble_mode: str = "mean_nmse") -> float:
    """Open-loop k-step prediction error on held-out trajectories, squared
    error per dim divided by the dataset variance, averaged over steps, dims
    and window starts. Mean-mode rollouts; ensembles average the per-member
    NMSE (``ensemble_mode="nmse_of_mean"`` scores the mean prediction instead).
    """
    episodes = test_episodes.episodes if isinstance(test_episodes, Dataset) \
        else list(test_episodes)
    if not episodes:
        raise StructuralError("kstep_nmse: empty test set")
    dt_base = episodes[0].dt
    k_steps = int(round(duration / model.dt))
    if k_steps < 1 or abs(k_steps * model.dt - duration) > 1e-9:
        raise ConfigError(f"duration {duration}s is not a whole number of "
                          f"model steps at dt={model.dt}")
    k_mult = int(round(model.dt / dt_base))
    if k_mult < 1 or abs(k_mult * dt_base - model.dt) > 1e-9:
        raise ConfigError("model dt must be a multiple of the episode dt")
    st = stats if stats is not None else model.stats
    if st is None:
        raise ConfigError("kstep_nmse needs dataset stats (model has none)")
    starts, acts, targets = _nmse_windows(model, episodes, k_steps, k_mult,
                                          max_windows)
    members = model.members if isinstance(model, Ensemble) else [model]
    if ensemble_mode not in ("mean_nmse", "nmse_of_mean"):
        raise ConfigError(f"unknown ensemble_mode {ensemble_mode!r}")
    var = st.variance
    if ensemble_mode == "nmse_of_mean" and len(members) > 1:
        acc = None
        for m in members:
            traj, _ = m.rollout(starts, acts, None, "mean", None)
            acc = traj[:, 1:] if acc is None else acc + traj[:, 1:]
        err = acc / len(members) - targets
        return float(np.mean(err * err / var))
    values = []
    for m in members:
        traj, _ = m.rollout(starts, acts, None, "mean", None)
        err = traj[:, 1:] - targets
        values.append(float(np.mean(err * err / var)))
    return float(np.mean(values))


def divergence_rate(model, test_episodes, duration: float = 1.0,
                    max_windows: int = 512) -> float:
    """Fraction of open-loop rollouts (all members) dead within ``duration``."""
    episodes = test_episodes.episodes if isinstance(test_episodes, Dataset) \
        else list(test_episodes)
    dt_base = episodes[0].dt
    k_steps = int(round(duration / model.dt))
    k_mult = int(round(model.dt / dt_base))
    starts, acts, _ = _nmse_windows(model, episodes, k_steps, k_mult,
                                    max_windows)
    members = model.members if isinstance(model, Ensemble) else [model]
    dead = 0
    total = 0
    for m in members:
        _, dead_from = m.rollout(starts, acts, None, "mean", None)
        dead += int(np.sum(dead_from <= k_steps))
        total += len(dead_from)
    return dead / total


def discrepancy_stats(log) -> dict:
    """Summarize per-step discrepancy (expected - realized) / n over replans.

    Expected and realized are truncated symmetrically at the episode end.
    Returns mean, fraction positive, 95th percentile and the sample count;
    ``partial`` flags entries dropped for missing realized returns.
    """
    if not log.entries:
        raise StructuralError("discrepancy log is empty")
    per_step = []
    partial = bool(log.aborted)
    for entry in log.entries:
        realized = entry["realized"]
        if realized is None:
            partial = True
            continue
        n = min(len(entry["expected"]), len(realized))
        if n == 0:
            partial = True
            continue
        per_step.append((float(np.sum(entry["expected"][:n]))
                         - float(np.sum(realized[:n]))) / n)
    if not per_step:
        raise StructuralError("no discrepancy entries with realized returns")
    arr = np.asarray(per_step)
    return {"mean": float(arr.mean()),
            "fraction_positive": float(np.mean(arr > POSITIVE_EPS)),
            "p95": float(np.percentile(arr, 95)),
            "count": int(arr.size),
            "partial": partial}


def merge_discrepancy(summaries) -> dict:
    """Sample-weighted merge of per-episode discrepancy summaries."""
    summaries = [s for s in summaries if s is not None]
    if not summaries:
        return None
    total = sum(s["count"] for s in summaries)
    return {"mean": sum(s["mean"] * s["count"] for s in summaries) / total,
            "fraction_positive": sum(s["fraction_positive"] * s["count"]
                                     for s in summaries) / total,
            "p95": max(s["p95"] for s in summaries),
            "count": total,
            "partial": any(s["partial"] for s in summaries)}


def transfer_eval(model, spec, reward_fn_b, planner_cfg, rng: Rng,
                  episodes: int = 1, episode_length=None) -> MetricReport:
    """Plan with a model trained on task A against task B's reward; only the
    reward function changes (the dynamics model is task-independent)."""
    from .planner import mpc_episode

    report = MetricReport()
    summaries = []
    for i in range(episodes):
        ep, log = mpc_episode(planner_cfg, spec, reward_fn_b, model,
                              episode_len=episode_length,
                              rng=rng.fork(f"transfer/{i}"))
        report.normalized_rewards.append(normalized_reward(ep))
        report.partial = report.partial or log.aborted
        summaries.append(discrepancy_stats(log))
    report.discrepancy = merge_discrepancy(summaries)
    return report
