"""Episode storage, normalization statistics, splits, minibatch streams,
and the on-disk "DYND" dataset format."""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, StructuralError
from .numerics import Rng

DATASET_MAGIC = b"DYND"
DATASET_VERSION = 1
VARIANCE_FLOOR = 1e-8


@dataclass
class Episode:
    """One trajectory at a fixed control timestep.

    observations: (T+1, obs_dim); actions: (T, act_dim); rewards: (T,).
    """

    dt: float
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        T = self.actions.shape[0]
        if self.observations.shape[0] != T + 1 or self.rewards.shape[0] != T:
            raise StructuralError("episode row counts are inconsistent")
        if not (np.all(np.isfinite(self.observations))
                and np.all(np.isfinite(self.actions))
                and np.all(np.isfinite(self.rewards))):
            raise StructuralError("episode contains non-finite values")
        if np.any(self.rewards < 0.0) or np.any(self.rewards > 1.0):
            raise StructuralError("episode rewards must lie in [0, 1]")

    @property
    def length(self):
        return self.actions.shape[0]


@dataclass
class Dataset:
    episodes: list

    def __post_init__(self):
        if self.episodes:
            dt = self.episodes[0].dt
            od = self.episodes[0].observations.shape[1]
            ad = self.episodes[0].actions.shape[1]
            for ep in self.episodes:
                if ep.dt != dt or ep.observations.shape[1] != od \
                        or ep.actions.shape[1] != ad:
                    raise StructuralError("episodes disagree on dt or dims")

    @property
    def n_episodes(self):
        return len(self.episodes)

    @property
    def n_transitions(self):
        return sum(ep.length for ep in self.episodes)

    @property
    def dt(self):
        return self.episodes[0].dt

    @property
    def obs_dim(self):
        return self.episodes[0].observations.shape[1]

    @property
    def act_dim(self):
        return self.episodes[0].actions.shape[1]


@dataclass
class DatasetStats:
    """Per-dimension observation mean / variance and its diagonal Cholesky."""

    mean: np.ndarray
    variance: np.ndarray
    cholesky: np.ndarray
    count: int


@dataclass
class SubTrajectoryBatch:
    """Windows for (multi-)step training. Every window lies inside one episode.

    start_obs: (B, obs_dim); actions: (B, H, act_dim) (mean over the k base
    actions of each model step); target_obs: (B, H, obs_dim) at model-step
    boundaries. ``starts`` records (episode index, start step) provenance.
    """

    dt: float
    start_obs: np.ndarray
    actions: np.ndarray
    target_obs: np.ndarray
    starts: np.ndarray

    @property
    def batch_size(self):
        return self.start_obs.shape[0]

    @property
    def horizon(self):
        return self.actions.shape[1]


def compute_stats(dataset: Dataset) -> DatasetStats:
    """Population mean/variance over all observations, variance floored at
    1e-8 before the square root."""
    if not dataset.episodes or dataset.n_transitions < 1:
        raise StructuralError("need at least 2 observation samples for stats")
    all_obs = np.concatenate([ep.observations for ep in dataset.episodes], axis=0)
    mean = all_obs.mean(axis=0)
    var = all_obs.var(axis=0)
    var = np.maximum(var, VARIANCE_FLOOR)
    return DatasetStats(mean=mean, variance=var, cholesky=np.sqrt(var),
                        count=all_obs.shape[0])


def split(dataset: Dataset, test_fraction: float, rng: Rng):
    """Episode-granularity split; deterministic given rng; disjoint and
    exhaustive. Returns (train, test)."""
    n = dataset.n_episodes
    if n < 5:
        raise ConfigError(f"need at least 5 episodes to split, got {n}")
    n_test = max(1, int(round(test_fraction * n)))
    perm = rng.fork("split").permutation(n)
    test_ids = set(perm[:n_test].tolist())
    train_eps = [dataset.episodes[i] for i in range(n) if i not in test_ids]
    test_eps = [dataset.episodes[i] for i in range(n) if i in test_ids]
    return Dataset(train_eps), Dataset(test_eps)


class _FlatView:
    """Contiguous concatenation of all episodes with window bookkeeping."""

    def __init__(self, dataset: Dataset, horizon: int, k: int):
        span = horizon * k
        starts = []          # global start index into the flattened arrays
        ep_starts = []       # (episode, local start) provenance
        obs_parts, act_parts = [], []
        offset = 0
        for ei, ep in enumerate(dataset.episodes):
            if ep.length < span:
                raise ConfigError(
                    f"episode {ei} has {ep.length} steps < horizon*k = {span}")
            # leave room: window needs obs rows start..start+span and action
            # rows start..start+span-1
            n_valid = ep.length - span + 1
            starts.extend(range(offset, offset + n_valid))
            ep_starts.extend((ei, s) for s in range(n_valid))
            obs_parts.append(ep.observations[:-1])
            act_parts.append(ep.actions)
            offset += ep.length
        self.obs = np.concatenate(obs_parts, axis=0)
        self.next_obs = np.concatenate(
            [ep.observations[1:] for ep in dataset.episodes], axis=0)
        self.actions = np.concatenate(act_parts, axis=0)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.ep_starts = np.asarray(ep_starts, dtype=np.int64)
        self.horizon = horizon
        self.k = k
        self.dt = dataset.dt
        # target j (1-based model step) is the observation after start + j*k - 1
        self.target_offsets = k * np.arange(1, horizon + 1) - 1
        self.action_offsets = (k * np.arange(horizon)[:, None]
                               + np.arange(k)[None, :])

    def gather(self, idx):
        g = self.starts[idx]
        start_obs = self.obs[g]
        target = self.next_obs[g[:, None] + self.target_offsets[None, :]]
        acts = self.actions[g[:, None, None] + self.action_offsets[None, :, :]]
        return SubTrajectoryBatch(
            dt=self.dt * self.k,
            start_obs=start_obs,
            actions=acts.mean(axis=2),
            target_obs=target,
            starts=self.ep_starts[idx],
        )


def minibatch_stream(train: Dataset, member_id: int, batch: int, horizon: int,
                     model_dt_multiple: int = 1, rng: Rng = None):
    """Infinite iterator of SubTrajectoryBatch.

    Each epoch enumerates every admissible window start exactly once, in a
    permutation seeded by (rng, member_id); distinct members see the same
    window multiset in different orders (the ensemble bootstrap). Windows
    stride ``model_dt_multiple`` base steps per model step and use the mean
    of the covered base actions.
    """
    if horizon < 1 or model_dt_multiple < 1:
        raise ConfigError("horizon and model_dt_multiple must be >= 1")
    flat = _FlatView(train, horizon, model_dt_multiple)
    n = len(flat.starts)
    stream_rng = (rng or Rng(0)).fork(f"minibatch/{member_id}")
    epoch = 0
    while True:
        perm = stream_rng.fork(f"epoch/{epoch}").permutation(n)
        for lo in range(0, n, batch):
            yield flat.gather(perm[lo:lo + batch])
        epoch += 1


def epoch_window_count(train: Dataset, horizon: int, model_dt_multiple: int = 1):
    return len(_FlatView(train, horizon, model_dt_multiple).starts)


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

# Quality presets standing in for the "dataset 0..4" sweep: the true-model
# MPC share and its particle budget grow with the quality level.
QUALITY_PRESETS = {
    0: [{"kind": "random", "episodes": 1.0}],
    1: [{"kind": "random", "episodes": 0.5}, {"kind": "smoothed", "episodes": 0.25},
        {"kind": "mpc_true", "episodes": 0.25, "particles": 30}],
    2: [{"kind": "random", "episodes": 0.3}, {"kind": "smoothed", "episodes": 0.2},
        {"kind": "mpc_true", "episodes": 0.5, "particles": 60}],
    3: [{"kind": "random", "episodes": 0.15}, {"kind": "smoothed", "episodes": 0.1},
        {"kind": "mpc_true", "episodes": 0.75, "particles": 100}],
    4: [{"kind": "mpc_true", "episodes": 1.0, "particles": 150}],
}

_MPC_COLLECT_DEFAULTS = {"horizon_s": 0.6, "replan_s": 0.05, "beta": 2.0,
                         "sigma_explore": 0.7, "explore_action_noise": 0.05}


def _random_policy(spec, rng):
    def policy(obs, t):
        return rng.uniform(-1.0, 1.0, spec.act_dim)
    return policy


def _smoothed_policy(spec, length, rng, beta, amplitude):
    from .planner import sample_colored_noise
    noise = sample_colored_noise(rng, beta, length, spec.act_dim, amplitude)
    noise = np.clip(noise, -1.0, 1.0)

    def policy(obs, t):
        return noise[t]
    return policy


def _mpc_policy(spec, reward_fn, length, rng, options):
    from .models import TrueModel
    from .planner import PlannerConfig, cem_plan

    opts = dict(_MPC_COLLECT_DEFAULTS)
    opts.update(options)
    cfg = PlannerConfig(
        horizon_s=opts["horizon_s"],
        control_spacing_s=opts.get("control_spacing_s", 4 * spec.dt_base),
        particles=int(opts.get("particles", 60)),
        iterations=1,
        elite_frac=0.1,
        sigma_explore=opts["sigma_explore"],
        beta=opts["beta"],
        argmax=True,
        replan_s=opts["replan_s"],
        warm_start=True,
    )
    model = TrueModel(spec, spec.dt_base)
    n_replan = int(round(opts["replan_s"] / spec.dt_base))
    state = {"plan": None, "t0": 0}
    noise_rng = rng.fork("explore")

    def policy(obs, t):
        if t % n_replan == 0:
            state["plan"] = cem_plan(cfg, model, spec, reward_fn, obs,
                                     state["plan"], rng.fork(f"plan/{t}"))
            state["t0"] = t
        tau = (t - state["t0"]) * spec.dt_base
        action = state["plan"].action_at(tau)
        # small dither keeps collected data off the planner's knife edge
        action = action + opts["explore_action_noise"] * noise_rng.gaussian(spec.act_dim)
        return np.clip(action, -1.0, 1.0)
    return policy


def collect_dataset(spec, reward_fn, collectors, rng: Rng,
                    episode_length=None) -> Dataset:
    """Concatenate episodes from the listed collectors.

    ``collectors``: list of dicts with at least {"kind", "episodes"}; kinds
    are "random" (uniform actions), "smoothed" (colored-noise actions) and
    "mpc_true" (true-model MPC with a capped particle budget).
    """
    from . import envs  # deferred: envs imports Episode from this module

    length = episode_length or spec.episode_length
    episodes = []
    total = 0
    for ci, coll in enumerate(collectors):
        kind = coll.get("kind")
        count = int(coll.get("episodes", 0))
        total += count
        for j in range(count):
            ep_rng = rng.fork(f"collect/{ci}/{kind}/{j}")
            if kind == "random":
                policy = _random_policy(spec, ep_rng.fork("actions"))
            elif kind == "smoothed":
                policy = _smoothed_policy(
                    spec, length, ep_rng.fork("actions"),
                    coll.get("beta", 2.0), coll.get("amplitude", 0.8))
            elif kind == "mpc_true":
                policy = _mpc_policy(spec, reward_fn, length, ep_rng.fork("mpc"),
                                     {k: v for k, v in coll.items()
                                      if k not in ("kind", "episodes")})
            else:
                raise ConfigError(f"unknown collector kind {kind!r}")
            episodes.append(envs.run_episode(spec, reward_fn, policy, length,
                                             ep_rng))
    if total < 1:
        raise ConfigError("collectors request zero episodes")
    return Dataset(episodes)


def quality_collectors(level: int, n_episodes: int):
    """Resolve a quality preset into absolute episode counts."""
    if level not in QUALITY_PRESETS:
        raise ConfigError(f"quality level must be 0..4, got {level}")
    out = []
    assigned = 0
    preset = QUALITY_PRESETS[level]
    for i, coll in enumerate(preset):
        c = dict(coll)
        if i == len(preset) - 1:
            c["episodes"] = n_episodes - assigned
        else:
            c["episodes"] = int(round(coll["episodes"] * n_episodes))
        assigned += c["episodes"]
        out.append(c)
    return out


# ---------------------------------------------------------------------------
# Persistence ("DYND" file)
# ---------------------------------------------------------------------------

def _pack_array(arr):
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return struct.pack("<I", len(arr.shape)) + \
        b"".join(struct.pack("<I", d) for d in arr.shape) + data


def save_dataset(dataset: Dataset, path, env_name="unknown"):
    body = [struct.pack("<d", dataset.dt) if dataset.episodes else struct.pack("<d", 0.0)]
    name = env_name.encode()
    body.insert(0, struct.pack("<I", len(name)) + name)
    body.append(struct.pack("<I", dataset.n_episodes))
    for ep in dataset.episodes:
        body.append(_pack_array(ep.observations))
        body.append(_pack_array(ep.actions))
        body.append(_pack_array(ep.rewards))
    payload = b"".join(body)
    header = DATASET_MAGIC + struct.pack("<I", DATASET_VERSION)
    crc = struct.pack("<I", zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(header + payload + crc)


def _unpack_array(view, off):
    (ndim,) = struct.unpack_from("<I", view, off)
    off += 4
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<I", view, off)
        shape.append(d)
        off += 4
    count = int(np.prod(shape)) if shape else 1
    if off + 8 * count > len(view):
        raise FormatError("truncated array payload")
    arr = np.frombuffer(view, dtype="<f8", count=count, offset=off)
    return arr.reshape(shape).astype(np.float64), off + 8 * count


def load_dataset(path):
    """Returns (Dataset, env_name). Raises FormatError on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != DATASET_MAGIC:
        raise FormatError("bad magic, expected DYND")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported DYND version {version}")
    payload = blob[8:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != stored_crc:
        raise FormatError("DYND checksum mismatch")
    view = memoryview(payload)
    off = 0
    (name_len,) = struct.unpack_from("<I", view, off)
    off += 4
    env_name = bytes(view[off:off + name_len]).decode()
    off += name_len
    (dt,) = struct.unpack_from("<d", view, off)
    off += 8
    (n_eps,) = struct.unpack_from("<I", view, off)
    off += 4
    episodes = []
    for _ in range(n_eps):
        obs, off = _unpack_array(view, off)
        actions, off = _unpack_array(view, off)
        rewards, off = _unpack_array(view, off)
        episodes.append(Episode(dt=dt, observations=obs, actions=actions,
                                rewards=rewards))
    if off != len(payload):
        raise FormatError("trailing bytes in DYND payload")
    return Dataset(episodes), env_name
