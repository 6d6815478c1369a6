"""Losses, input-noise augmentation, horizon scheduling, training loop.

All losses work in the standardized-delta space the models use internally:
targets are (x_next - x) / L and predictions dt * g(...), so the normalized
MSE of the spec's integrator form falls out exactly. Gradients are exact
reverse-mode, chained through the unrolled multi-step prediction and through
the sigma-bounding transform.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, DatasetStats, SubTrajectoryBatch, minibatch_stream
from .errors import ConfigError
from .models import Ensemble, StochasticModel, bound_sigma, bound_sigma_grad
from .numerics import (Rng, adam_init, adam_update, grads_global_norm,
                       grads_scale, mlp_backward, mlp_forward, zero_grads_like)

LOSS_KINDS = ("nmse1", "nmse_multi", "nll1")


@dataclass
class TrainConfig:
    loss: str = "nmse_multi"
    multistep_horizon: int = 1
    schedule: str = "none"          # "none" | "linear"
    input_noise: float = 0.0        # lambda, in dataset-Cholesky units
    batch_size: int = 256
    learning_rate: float = 5e-4
    updates: int = 20000
    checkpoint_interval: int = 1000
    grad_clip: float = 100.0
    nmse_eval_windows: int = 512
    nmse_duration_s: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.loss in ("nmse1", "nll1") and self.multistep_horizon != 1:
            raise ConfigError(f"{self.loss} forces multistep_horizon = 1")
        if self.multistep_horizon < 1:
            raise ConfigError("multistep_horizon must be >= 1")
        if self.schedule not in ("none", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.input_noise < 0:
            raise ConfigError("input_noise must be >= 0")

    def validate_model(self, model):
        stochastic = getattr(model, "is_stochastic", False)
        if stochastic and self.loss != "nll1":
            raise ConfigError("stochastic models train with loss='nll1' only "
                              "(multi-step uncertainty propagation is out of scope)")
        if not stochastic and self.loss == "nll1":
            raise ConfigError("nll1 requires a stochastic model")


@dataclass
class LearningCurve:
    """Per-member checkpoint log plus the horizon-schedule trace."""

    member_id: int
    rows: list = field(default_factory=list)  # dicts per checkpoint
    horizon_transitions: list = field(default_factory=list)  # (update, H)
    aborted: bool = False
    abort_reason: str = ""

    def add(self, update_idx, train_loss, test_nmse, planner_reward=None):
        if self.rows and update_idx <= self.rows[-1]["update"]:
            raise ConfigError("checkpoint update indices must increase")
        self.rows.append({"update": update_idx, "member": self.member_id,
                          "train_loss": train_loss, "test_nmse": test_nmse,
                          "planner_reward": planner_reward})


def horizon_schedule(update_idx, total_updates, h_target, mode):
    """Current multi-step horizon; "linear" ramps 1..H over the run."""
    if mode == "none":
        return h_target
    if mode != "linear":
        raise ConfigError(f"unknown schedule mode {mode!r}")
    h = math.ceil(h_target * (update_idx + 1) / total_updates)
    return max(1, min(h_target, h))


def apply_input_noise(batch: SubTrajectoryBatch, lam, stats: DatasetStats,
                      rng: Rng) -> SubTrajectoryBatch:
    """Perturb start observations by lam * L_D * omega; targets untouched."""
    if lam < 0:
        raise ConfigError("noise amplitude must be >= 0")
    if lam == 0.0:
        return batch
    omega = rng.gaussian(batch.start_obs.shape)
    return SubTrajectoryBatch(
        dt=batch.dt,
        start_obs=batch.start_obs + lam * stats.cholesky * omega,
        actions=batch.actions,
        target_obs=batch.target_obs,
        starts=batch.starts,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _chain_forward_backward(model, batch, horizon, lam, rng):
    """Normalized multi-step MSE with gradients through the unrolled chain.

    Fresh input noise is drawn per unrolled step (every network-input
    evaluation); the integration base point stays clean and gradients do not
    flow into the noise.
    """
    stats = model.stats
    chol = stats.cholesky
    obs_dim = model.obs_dim
    start = batch.start_obs
    b = start.shape[0]
    denom = horizon * b * obs_dim
    x_hat = start
    caches = []
    residuals = []
    loss = 0.0
    for j in range(horizon):
        net_obs = x_hat
        if lam > 0.0:
            net_obs = x_hat + lam * chol * rng.gaussian(x_hat.shape)
        inp = np.empty((b, obs_dim + model.act_dim))
        inp[:, :obs_dim] = (net_obs - stats.mean) / chol
        inp[:, obs_dim:] = batch.actions[:, j]
        g, cache = mlp_forward(model.params, inp)
        x_hat = x_hat + model.dt * chol * g
        r = (x_hat - batch.target_obs[:, j]) / chol
        loss += float(np.sum(r * r))
        caches.append(cache)
        residuals.append(r)
    loss /= denom

    grads = zero_grads_like(model.params)
    carry = np.zeros_like(start)
    for j in range(horizon - 1, -1, -1):
        delta = carry + (2.0 / denom) * residuals[j] / chol
        layer_grads, d_inp = mlp_backward(model.params, caches[j],
                                          model.dt * chol * delta)
        for target_arr, g_arr in zip(grads.arrays(), layer_grads.arrays()):
            target_arr += g_arr
        carry = delta + d_inp[:, :obs_dim] / chol
    return loss, grads


def loss_nmse_multistep(model, batch: SubTrajectoryBatch, horizon,
                        input_noise=0.0, rng=None):
    """Chained-prediction normalized MSE over ``horizon`` model steps.

    Normalization uses the model's frozen train-split stats (the same stats
    that standardize the network inputs)."""
    if batch.horizon < horizon:
        raise ConfigError(f"batch windows ({batch.horizon}) shorter than "
                          f"requested horizon ({horizon})")
    return _chain_forward_backward(model, batch, horizon, input_noise, rng)


def loss_nmse_1step(model, batch: SubTrajectoryBatch, input_noise=0.0,
                    rng=None):
    """1-step normalized MSE (the multi-step loss at H = 1)."""
    return _chain_forward_backward(model, batch, 1, input_noise, rng)


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def loss_nll_1step(model: StochasticModel, batch: SubTrajectoryBatch,
                   input_noise=0.0, rng=None):
    """Gaussian negative log-likelihood of the standardized observed delta
    under (mu, bounded sigma), with exact gradients through the bounding."""
    st = model.stats
    chol = st.cholesky
    obs_dim = model.obs_dim
    start = batch.start_obs
    b = start.shape[0]
    net_obs = start
    if input_noise > 0.0:
        net_obs = start + input_noise * chol * rng.gaussian(start.shape)
    inp = np.empty((b, obs_dim + model.act_dim))
    inp[:, :obs_dim] = (net_obs - st.mean) / chol
    inp[:, obs_dim:] = batch.actions[:, 0]
    out, cache = mlp_forward(model.params, inp)
    mu = out[:, :obs_dim]
    raw = out[:, obs_dim:]
    if model.sigma_param == "log":
        pre = np.exp(raw)
    else:
        pre = raw
    sigma = bound_sigma(pre, model.sigma_min, model.sigma_max)

    target = (batch.target_obs[:, 0] - start) / chol  # standardized delta
    mean_eff = model.dt * mu
    sigma_eff = model.dt * sigma
    z = (target - mean_eff) / sigma_eff
    loss = float(np.mean(_HALF_LOG_2PI + np.log(sigma_eff) + 0.5 * z * z))

    denom = b * obs_dim
    d_mu = (-z / sigma_eff) * model.dt / denom
    d_sigma = ((1.0 - z * z) / sigma_eff) * model.dt / denom
    d_pre = d_sigma * bound_sigma_grad(pre, model.sigma_min, model.sigma_max)
    d_raw = d_pre * pre if model.sigma_param == "log" else d_pre
    upstream = np.concatenate([d_mu, d_raw], axis=1)
    grads, _ = mlp_backward(model.params, cache, upstream)
    return loss, grads


def _loss_step(model, batch, cfg: TrainConfig, horizon, noise_rng):
    if cfg.loss == "nll1":
        return loss_nll_1step(model, batch, input_noise=cfg.input_noise,
                              rng=noise_rng)
    if cfg.loss == "nmse1":
        return loss_nmse_1step(model, batch, input_noise=cfg.input_noise,
                               rng=noise_rng)
    return loss_nmse_multistep(model, batch, horizon,
                               input_noise=cfg.input_noise, rng=noise_rng)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(model, train_ds: Dataset, cfg: TrainConfig, test_ds: Dataset = None,
          checkpoint_hook=None):
    """Train a model or every member of an ensemble.

    Per-member loop: minibatch stream (member-specific shuffle) -> optional
    input noise -> loss -> clipped Adam step. At each checkpoint interval the
    test 0.5 s NMSE is recorded (subsampled windows); ``checkpoint_hook``
    (member_id, update_idx, model) may add a planner-reward entry.

    Returns (model, [LearningCurve per member]). Deterministic given
    (dataset, config, seed).
    """
    from .evaluation import kstep_nmse

    cfg.validate_model(model)
    members = model.members if isinstance(model, Ensemble) else [model]
    k = max(1, int(round(model.dt / train_ds.dt)))
    curves = []
    root = Rng(cfg.seed)
    for member_id, member in enumerate(members):
        curve = LearningCurve(member_id=member_id)
        stream = minibatch_stream(train_ds, member_id, cfg.batch_size,
                                  cfg.multistep_horizon, k, root)
        noise_rng = root.fork(f"input_noise/{member_id}")
        opt = adam_init(member.params, cfg.learning_rate)
        loss_acc, loss_n = 0.0, 0
        last_h = None
        for u in range(cfg.updates):
            h = horizon_schedule(u, cfg.updates, cfg.multistep_horizon,
                                 cfg.schedule)
            if h != last_h:
                curve.horizon_transitions.append((u, h))
                last_h = h
            batch = next(stream)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _loss_step(member, batch, cfg, h, noise_rng)
                norm = grads_global_norm(grads)
            if not np.isfinite(loss) or not np.isfinite(norm):
                curve.aborted = True
                curve.abort_reason = f"non-finite loss or gradient at update {u}"
                break
            if cfg.grad_clip > 0 and norm > cfg.grad_clip:
                grads = grads_scale(grads, cfg.grad_clip / norm)
            member.params, opt = adam_update(opt, member.params, grads)
            loss_acc += loss
            loss_n += 1
            if (u + 1) % cfg.checkpoint_interval == 0 or u + 1 == cfg.updates:
                nmse = None
                if test_ds is not None:
                    nmse = kstep_nmse(member, test_ds,
                                      duration=cfg.nmse_duration_s,
                                      max_windows=cfg.nmse_eval_windows)
                reward = None
                if checkpoint_hook is not None:
                    reward = checkpoint_hook(member_id, u + 1, member)
                curve.add(u + 1, loss_acc / max(1, loss_n), nmse, reward)
                loss_acc, loss_n = 0.0, 0
        curves.append(curve)
    return model, curves


def measure_update_time(model, train_ds, cfg: TrainConfig, n_updates=30,
                        warmup=5):
    """Median wall-clock seconds per update (scaling checks)."""
    cfg.validate_model(model)
    member = model.members[0] if isinstance(model, Ensemble) else model
    k = max(1, int(round(model.dt / train_ds.dt)))
    root = Rng(cfg.seed)
    stream = minibatch_stream(train_ds, 0, cfg.batch_size,
                              cfg.multistep_horizon, k, root)
    noise_rng = root.fork("input_noise/timing")
    opt = adam_init(member.params, cfg.learning_rate)
    times = []
    for u in range(warmup + n_updates):
        batch = next(stream)
        t0 = time.perf_counter()
        loss, grads = _loss_step(member, batch, cfg, cfg.multistep_horizon,
                                 noise_rng)
        member.params, opt = adam_update(opt, member.params, grads)
        if u >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def curves_to_csv_rows(curves):
    """Flatten learning curves to CSV rows: update, member, train_loss,
    test_nmse, planner_reward (empty when not evaluated)."""
    rows = []
    for curve in curves:
        for r in curve.rows:
            rows.append((r["update"], r["member"], r["train_loss"],
                         "" if r["test_nmse"] is None else r["test_nmse"],
                         "" if r["planner_reward"] is None else r["planner_reward"]))
    return rows
