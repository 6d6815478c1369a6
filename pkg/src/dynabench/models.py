"""Dynamics models sharing the integrator prediction form.

Every model predicts the next observation as obs + dt * delta(obs, action).
Learned models standardize internally: network inputs are (obs - mean) / L
with the action appended, and the network output is a standardized delta
rate, de-standardized at the interface. The ground-truth wrapper runs the
analytic simulator through the same rollout surface.
"""

import struct

import numpy as np

from . import envs
from .dataset import DatasetStats
from .errors import FormatError, NumericError, StructuralError
from .numerics import (MlpParams, Rng, mlp_apply, mlp_init, params_from_bytes,
                       params_to_bytes)

MODEL_MAGIC = b"DYNM"
MODEL_VERSION = 1
_KIND_CODE = {"deterministic": 0, "stochastic": 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


def _softplus(x):
    # log(1 + e^x), overflow-safe
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bound_sigma(raw, sigma_min, sigma_max):
    """Two-sided softplus squashing of a raw standard-deviation head.

    Upper pass s1 = smax - S(smax - raw), then lower pass smin + S(s1 - smin).
    Strictly increasing in raw; range (sigma_min, sigma_max + ln 2).
    """
    if not sigma_max > sigma_min >= 0.0:
        raise StructuralError("need sigma_max > sigma_min >= 0")
    s1 = sigma_max - _softplus(sigma_max - raw)
    out = sigma_min + _softplus(s1 - sigma_min)
    # softplus underflows to 0 below raw ~ -745; keep the bound strict at the
    # tightest float64 can express
    return np.maximum(out, np.nextafter(sigma_min, np.inf))


def bound_sigma_grad(raw, sigma_min, sigma_max):
    """d bound_sigma / d raw (both softplus passes contribute a sigmoid)."""
    s1 = sigma_max - _softplus(sigma_max - raw)
    return _sigmoid(s1 - sigma_min) * _sigmoid(sigma_max - raw)


def _as_batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    b = x.reshape(1, -1) if squeeze else x
    if b.shape[-1] != dim:
        raise StructuralError(f"{what} dim {b.shape[-1]} != expected {dim}")
    return b, squeeze


class _ModelBase:
    """Shared rollout machinery. Subclasses implement _step_batch."""

    is_stochastic = False

    @property
    def n_members(self):
        return 1

    def _step_batch(self, obs, action, mode, noise):
        raise NotImplementedError

    def predict_mean(self, obs, action):
        obs_b, squeeze = _as_batch(obs, self.obs_dim, "obs")
        act_b, _ = _as_batch(action, self.act_dim, "action")
        out = self._step_batch(obs_b, act_b, "mean", None)
        if not np.all(np.isfinite(out)):
            raise NumericError("predict_mean produced non-finite output")
        return out[0] if squeeze else out

    def rollout(self, obs0, actions, member_ids, mode, rng):
        """Chained predictions; frozen rows after a non-finite prediction.

        obs0: (N, obs_dim); actions: (N, H, act_dim). Returns (traj, dead_from)
        with traj (N, H+1, obs_dim) and dead_from[i] = index of the first
        frozen row (H+1 when the rollout stayed alive).
        """
        obs0 = np.asarray(obs0, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        n, horizon = actions.shape[0], actions.shape[1]
        traj = np.empty((n, horizon + 1, self.obs_dim))
        traj[:, 0] = obs0
        dead_from = np.full(n, horizon + 1, dtype=np.int64)
        if horizon == 0:
            return traj, dead_from
        noise = None
        if mode == "sample":
            if rng is None:
                raise StructuralError("sample-mode rollout needs an rng")
            noise = rng.gaussian((n, horizon, self.obs_dim))
        x = obs0.copy()
        alive = np.ones(n, dtype=bool)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(horizon):
                nxt = self._step_batch(x, actions[:, j],
                                       mode, None if noise is None else noise[:, j])
                finite = np.isfinite(nxt).all(axis=1)
                newly_dead = alive & ~finite
                if newly_dead.any():
                    dead_from[newly_dead] = j + 1
                    alive &= finite
                x = np.where(finite[:, None], nxt, x)
                traj[:, j + 1] = x
        return traj, dead_from


class DeterministicModel(_ModelBase):
    """MLP predicting a standardized delta rate: obs' = obs + dt * L * g."""

    kind = "deterministic"

    def __init__(self, params: MlpParams, dt: float, stats: DatasetStats):
        self.obs_dim = stats.mean.shape[0]
        self.act_dim = params.in_dim - self.obs_dim
        if params.out_dim != self.obs_dim or self.act_dim < 1:
            raise StructuralError("network dims inconsistent with stats")
        self.params = params
        self.dt = float(dt)
        self.stats = stats

    def net_input(self, obs, action):
        inp = np.empty(obs.shape[:-1] + (self.obs_dim + self.act_dim,))
        inp[..., :self.obs_dim] = (obs - self.stats.mean) / self.stats.cholesky
        inp[..., self.obs_dim:] = action
        return inp

    def _step_batch(self, obs, action, mode, noise):
        g = mlp_apply(self.params, self.net_input(obs, action))
        return obs + self.dt * self.stats.cholesky * g


class StochasticModel(_ModelBase):
    """MLP with mean and bounded-sigma heads over the standardized delta."""

    kind = "stochastic"
    is_stochastic = True

    def __init__(self, params: MlpParams, dt: float, stats: DatasetStats,
                 sigma_min=1e-4, sigma_max=10.0, sigma_param="raw"):
        self.obs_dim = stats.mean.shape[0]
        self.act_dim = params.in_dim - self.obs_dim
        if params.out_dim != 2 * self.obs_dim or self.act_dim < 1:
            raise StructuralError("stochastic net must have 2*obs_dim outputs")
        if sigma_param not in ("raw", "log"):
            raise StructuralError("sigma_param must be 'raw' or 'log'")
        self.params = params
        self.dt = float(dt)
        self.stats = stats
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.sigma_param = sigma_param

    net_input = DeterministicModel.net_input

    def heads(self, obs, action):
        """(mu, sigma) of the standardized delta rate; sigma is bounded."""
        out = mlp_apply(self.params, self.net_input(obs, action))
        mu = out[..., :self.obs_dim]
        raw = out[..., self.obs_dim:]
        if self.sigma_param == "log":
            raw = np.exp(raw)
        return mu, bound_sigma(raw, self.sigma_min, self.sigma_max)

    def _step_batch(self, obs, action, mode, noise):
        mu, sigma = self.heads(obs, action)
        rate = mu if mode == "mean" else mu + sigma * noise
        return obs + self.dt * self.stats.cholesky * rate

    def predict_sample(self, obs, action, rng: Rng):
        obs_b, squeeze = _as_batch(obs, self.obs_dim, "obs")
        act_b, _ = _as_batch(action, self.act_dim, "action")
        noise = rng.gaussian(obs_b.shape)
        out = self._step_batch(obs_b, act_b, "sample", noise)
        if not np.all(np.isfinite(out)):
            raise NumericError("predict_sample produced non-finite output")
        return out[0] if squeeze else out

    def predict_moments(self, obs, action):
        """(mean next obs, per-dim std of the next-obs distribution)."""
        obs_b, squeeze = _as_batch(obs, self.obs_dim, "obs")
        act_b, _ = _as_batch(action, self.act_dim, "action")
        mu, sigma = self.heads(obs_b, act_b)
        mean = obs_b + self.dt * self.stats.cholesky * mu
        std = self.dt * self.stats.cholesky * sigma
        return (mean[0], std[0]) if squeeze else (mean, std)


class Ensemble(_ModelBase):
    """Fixed-member-per-rollout ensemble of identically shaped models."""

    kind = "ensemble"

    def __init__(self, members):
        if not members:
            raise StructuralError("ensemble needs at least one member")
        kinds = {m.kind for m in members}
        if len(kinds) != 1:
            raise StructuralError("ensemble members must share a model kind")
        dts = {m.dt for m in members}
        if len(dts) != 1:
            raise StructuralError("ensemble members must share dt")
        self.members = list(members)
        self.dt = members[0].dt
        self.stats = members[0].stats
        self.obs_dim = members[0].obs_dim
        self.act_dim = members[0].act_dim
        self.is_stochastic = members[0].is_stochastic

    @property
    def n_members(self):
        return len(self.members)

    def predict_mean(self, obs, action, member=0):
        return self.members[member].predict_mean(obs, action)

    def rollout(self, obs0, actions, member_ids, mode, rng):
        obs0 = np.asarray(obs0, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        n, horizon = actions.shape[0], actions.shape[1]
        if member_ids is None:
            member_ids = np.zeros(n, dtype=np.int64)
        member_ids = np.asarray(member_ids)
        if member_ids.shape != (n,) or member_ids.min() < 0 \
                or member_ids.max() >= self.n_members:
            raise StructuralError("bad particle-to-member assignment")
        traj = np.empty((n, horizon + 1, self.obs_dim))
        dead_from = np.empty(n, dtype=np.int64)
        for m, member in enumerate(self.members):
            mask = member_ids == m
            if not mask.any():
                continue
            sub_rng = rng.fork(f"member/{m}") if rng is not None else None
            t, d = member.rollout(obs0[mask], actions[mask], None, mode, sub_rng)
            traj[mask] = t
            dead_from[mask] = d
        return traj, dead_from


class TrueModel(_ModelBase):
    """Ground-truth wrapper: the simulator behind the model interface.

    Reconstructs the minimal-coordinate state from the observation, steps the
    same RK4 integrator the environment uses, and re-observes.
    """

    kind = "true"

    def __init__(self, spec: envs.EnvSpec, dt=None):
        self.spec = spec
        self.dt = float(dt if dt is not None else spec.dt_base)
        self.obs_dim = spec.obs_dim
        self.act_dim = spec.act_dim
        self.stats = None

    def _step_batch(self, obs, action, mode, noise):
        state = envs.reconstruct_state(self.spec, obs)
        state = envs.dynamics_step(self.spec, state, action, self.dt)
        return envs.observe(self.spec, state)

    def rollout(self, obs0, actions, member_ids, mode, rng):
        """State-space rollout: reconstruct once, then step the simulator."""
        obs0 = np.asarray(obs0, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        n, horizon = actions.shape[0], actions.shape[1]
        traj = np.empty((n, horizon + 1, self.obs_dim))
        traj[:, 0] = obs0
        state = envs.reconstruct_state(self.spec, obs0)
        for j in range(horizon):
            state = envs.dynamics_step(self.spec, state, actions[:, j], self.dt)
            traj[:, j + 1] = envs.observe(self.spec, state)
        return traj, np.full(n, horizon + 1, dtype=np.int64)


def rollout_open_loop(model, member_id, obs0, actions, mode="mean", rng=None):
    """Single-trajectory open-loop rollout using only the selected member."""
    obs0 = np.asarray(obs0, dtype=np.float64).reshape(1, -1)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1:
        actions = actions.reshape(-1, 1)
    actions = actions.reshape(1, *actions.shape)
    ids = np.array([member_id], dtype=np.int64)
    traj, dead_from = model.rollout(obs0, actions, ids, mode, rng)
    return traj[0], int(dead_from[0])


def ensemble_rollouts(ensemble, obs0_batch, action_batch, assignment,
                      mode="mean", rng=None):
    """Batched rollouts with an explicit particle-to-member assignment."""
    return ensemble.rollout(obs0_batch, action_batch, assignment, mode, rng)


def make_model(kind, spec_or_dims, hidden, activation, dt, stats, rng,
               ensemble_size=1, sigma_min=1e-4, sigma_max=10.0,
               sigma_param="raw"):
    """Build a (possibly ensembled) learned model with Glorot-initialized
    members, each seeded from its own fork of ``rng``."""
    obs_dim = stats.mean.shape[0]
    act_dim = spec_or_dims.act_dim if hasattr(spec_or_dims, "act_dim") \
        else int(spec_or_dims)
    out_dim = obs_dim if kind == "deterministic" else 2 * obs_dim
    sizes = [obs_dim + act_dim] + list(hidden) + [out_dim]

    def one(i):
        params = mlp_init(rng.fork(f"member/{i}"), sizes, activation)
        if kind == "deterministic":
            return DeterministicModel(params, dt, stats)
        if kind == "stochastic":
            return StochasticModel(params, dt, stats, sigma_min, sigma_max,
                                   sigma_param)
        raise StructuralError(f"unknown model kind {kind!r}")

    if ensemble_size == 1:
        return one(0)
    return Ensemble([one(i) for i in range(ensemble_size)])


# ---------------------------------------------------------------------------
# Checkpoints ("DYNM" file)
# ---------------------------------------------------------------------------

def save_model(model, path):
    members = model.members if isinstance(model, Ensemble) else [model]
    first = members[0]
    if first.kind not in _KIND_CODE:
        raise StructuralError(f"cannot serialize model kind {first.kind!r}")
    smin = getattr(first, "sigma_min", 0.0)
    smax = getattr(first, "sigma_max", 0.0)
    sparam = getattr(first, "sigma_param", "raw")
    stats = first.stats
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
             struct.pack("<B", _KIND_CODE[first.kind]),
             struct.pack("<d", first.dt),
             struct.pack("<dd", smin, smax),
             struct.pack("<B", 1 if sparam == "log" else 0),
             struct.pack("<I", stats.mean.shape[0]),
             np.ascontiguousarray(stats.mean, dtype="<f8").tobytes(),
             np.ascontiguousarray(stats.variance, dtype="<f8").tobytes(),
             struct.pack("<q", stats.count),
             struct.pack("<I", len(members))]
    for m in members:
        blob = params_to_bytes(m.params)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9 or blob[:4] != MODEL_MAGIC:
        raise FormatError("bad magic, expected DYNM")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported DYNM version {version}")
    off = 8
    (kind_code,) = struct.unpack_from("<B", blob, off); off += 1
    if kind_code not in _KIND_NAME:
        raise FormatError(f"unknown model kind code {kind_code}")
    kind = _KIND_NAME[kind_code]
    (dt,) = struct.unpack_from("<d", blob, off); off += 8
    smin, smax = struct.unpack_from("<dd", blob, off); off += 16
    (sparam_code,) = struct.unpack_from("<B", blob, off); off += 1
    (obs_dim,) = struct.unpack_from("<I", blob, off); off += 4
    mean = np.frombuffer(blob, dtype="<f8", count=obs_dim, offset=off).copy()
    off += 8 * obs_dim
    var = np.frombuffer(blob, dtype="<f8", count=obs_dim, offset=off).copy()
    off += 8 * obs_dim
    (count,) = struct.unpack_from("<q", blob, off); off += 8
    stats = DatasetStats(mean=mean, variance=var, cholesky=np.sqrt(var),
                         count=count)
    (n_members,) = struct.unpack_from("<I", blob, off); off += 4
    members = []
    for _ in range(n_members):
        if off + 8 > len(blob):
            raise FormatError("truncated DYNM member table")
        (blen,) = struct.unpack_from("<Q", blob, off); off += 8
        if off + blen > len(blob):
            raise FormatError("truncated DYNM member blob")
        params = params_from_bytes(blob[off:off + blen])
        off += blen
        if kind == "deterministic":
            members.append(DeterministicModel(params, dt, stats))
        else:
            members.append(StochasticModel(
                params, dt, stats, smin, smax,
                "log" if sparam_code == 1 else "raw"))
    if off != len(blob):
        raise FormatError("trailing bytes in DYNM file")
    return members[0] if n_members == 1 else Ensemble(members)
