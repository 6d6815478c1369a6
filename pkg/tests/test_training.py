import math

import numpy as np
import pytest

from dynabench import envs
from dynabench.dataset import (Dataset, DatasetStats, Episode,
                               SubTrajectoryBatch, compute_stats,
                               minibatch_stream, split)
from dynabench.errors import ConfigError
from dynabench.models import (DeterministicModel, StochasticModel, bound_sigma,
                              make_model)
from dynabench.numerics import MlpParams, Rng, mlp_init, zero_grads_like
from dynabench.training import (TrainConfig, apply_input_noise,
                                horizon_schedule, loss_nll_1step,
                                loss_nmse_1step, loss_nmse_multistep,
                                measure_update_time, train)

from conftest import make_episode


def unit_stats(dim, var=None):
    var = np.ones(dim) if var is None else np.asarray(var, dtype=float)
    return DatasetStats(mean=np.zeros(dim), variance=var,
                        cholesky=np.sqrt(var), count=10)


def make_batch(rng, b=6, h=3, obs_dim=3, act_dim=1, dt=0.01):
    return SubTrajectoryBatch(
        dt=dt,
        start_obs=rng.fork("s").gaussian((b, obs_dim)),
        actions=rng.fork("a").uniform(-1, 1, (b, h, act_dim)),
        target_obs=rng.fork("t").gaussian((b, h, obs_dim)),
        starts=np.zeros((b, 2), dtype=np.int64),
    )


def fd_param_grads(loss_fn, model, eps=1e-5):
    """Central finite differences of a scalar loss over every parameter."""
    num = zero_grads_like(model.params)
    for p_arr, n_arr in zip(model.params.arrays(), num.arrays()):
        flat_p, flat_n = p_arr.ravel(), n_arr.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            hi = loss_fn()
            flat_p[i] = orig - eps
            lo = loss_fn()
            flat_p[i] = orig
            flat_n[i] = (hi - lo) / (2 * eps)
    return num


def assert_grads_close(analytic, numeric, rtol=1e-4, floor=1e-7):
    for a, n in zip(analytic.arrays(), numeric.arrays()):
        denom = np.maximum(np.abs(n), floor)
        assert np.max(np.abs(a - n) / denom) < rtol


class TestNmse1Step:
    def test_perfect_model_zero_loss(self):
        # synthesize targets from the model itself
        stats = unit_stats(2)
        rng = Rng(1)
        params = mlp_init(rng, [3, 8, 2], "swish")
        model = DeterministicModel(params, 0.05, stats)
        start = rng.fork("s").gaussian((5, 2))
        actions = rng.fork("a").uniform(-1, 1, (5, 1, 1))
        targets = model.predict_mean(start, actions[:, 0])[:, None, :]
        batch = SubTrajectoryBatch(dt=0.05, start_obs=start, actions=actions,
                                   target_obs=targets,
                                   starts=np.zeros((5, 2), dtype=np.int64))
        loss, grads = loss_nmse_1step(model, batch)
        assert loss == pytest.approx(0.0, abs=1e-24)
        assert all(np.allclose(g, 0, atol=1e-12) for g in grads.arrays())

    def test_zero_model_hand_computed_fixture(self):
        # 2-transition fixture, hand arithmetic:
        # residual = delta / L, loss = mean over batch and dims
        var = np.array([4.0, 0.25])
        stats = unit_stats(2, var=var)
        model = DeterministicModel(
            MlpParams([np.zeros((2, 3))], [np.zeros(2)], ()), 0.01, stats)
        start = np.array([[0.0, 0.0], [1.0, 1.0]])
        delta = np.array([[0.2, -0.1], [0.4, 0.3]])
        batch = SubTrajectoryBatch(
            dt=0.01, start_obs=start, actions=np.zeros((2, 1, 1)),
            target_obs=(start + delta)[:, None, :],
            starts=np.zeros((2, 2), dtype=np.int64))
        loss, _ = loss_nmse_1step(model, batch)
        expected = np.mean(delta ** 2 / var)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_normalization_invariance(self):
        # scaling one dim by 10 together with its variance leaves loss fixed
        rng = Rng(2)
        stats = unit_stats(2)
        params = mlp_init(rng, [3, 6, 2], "relu")
        model = DeterministicModel(params, 0.02, stats)
        batch = make_batch(rng.fork("b"), h=1, obs_dim=2)
        loss_a, _ = loss_nmse_1step(model, batch)

        scale = np.array([10.0, 1.0])
        stats_b = DatasetStats(mean=np.zeros(2), variance=scale ** 2,
                               cholesky=scale, count=10)
        # rescale the world: observations (inputs and targets) scale by 10,
        # and the net must see identical standardized inputs
        model_b = DeterministicModel(params, 0.02, stats_b)
        batch_b = SubTrajectoryBatch(
            dt=batch.dt, start_obs=batch.start_obs * scale,
            actions=batch.actions, target_obs=batch.target_obs * scale,
            starts=batch.starts)
        loss_b, _ = loss_nmse_1step(model_b, batch_b)
        assert loss_b == pytest.approx(loss_a, rel=1e-12)

    def test_grad_matches_fd(self):
        rng = Rng(3)
        stats = unit_stats(3)
        model = DeterministicModel(mlp_init(rng, [4, 6, 3], "swish"), 0.05,
                                   stats)
        batch = make_batch(rng.fork("b"), b=4, h=1)
        _, grads = loss_nmse_1step(model, batch)
        # the closure sees parameter perturbations via the shared arrays
        numeric = fd_param_grads(
            lambda: loss_nmse_1step(model, batch)[0], model)
        assert_grads_close(grads, numeric)


class TestNmseMultistep:
    def test_h1_equals_1step(self):
        rng = Rng(4)
        model = DeterministicModel(mlp_init(rng, [4, 8, 3], "elu"), 0.01,
                                   unit_stats(3))
        for i in range(50):
            batch = make_batch(rng.fork(f"b{i}"), b=5, h=1)
            a, _ = loss_nmse_1step(model, batch)
            b, _ = loss_nmse_multistep(model, batch, 1)
            assert abs(a - b) <= 1e-12

    def test_h20_is_valid_config(self):
        TrainConfig(loss="nmse_multi", multistep_horizon=20)

    def test_chain_grad_matches_fd(self):
        rng = Rng(5)
        model = DeterministicModel(mlp_init(rng, [3, 5, 2], "swish"), 0.1,
                                   unit_stats(2))
        batch = make_batch(rng.fork("b"), b=3, h=3, obs_dim=2)
        _, grads = loss_nmse_multistep(model, batch, 3)
        numeric = fd_param_grads(
            lambda: loss_nmse_multistep(model, batch, 3)[0], model)
        assert_grads_close(grads, numeric)

    def test_uses_true_start_and_chains_predictions(self):
        # targets generated by the model's own chain -> zero loss
        rng = Rng(6)
        model = DeterministicModel(mlp_init(rng, [3, 6, 2], "swish"), 0.05,
                                   unit_stats(2))
        start = rng.fork("s").gaussian((4, 2))
        actions = rng.fork("a").uniform(-1, 1, (4, 3, 1))
        traj, _ = model.rollout(start, actions, None, "mean", None)
        batch = SubTrajectoryBatch(dt=0.05, start_obs=start, actions=actions,
                                   target_obs=traj[:, 1:],
                                   starts=np.zeros((4, 2), dtype=np.int64))
        loss, _ = loss_nmse_multistep(model, batch, 3)
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_horizon_longer_than_batch_rejected(self):
        rng = Rng(7)
        model = DeterministicModel(mlp_init(rng, [3, 4, 2], "relu"), 0.01,
                                   unit_stats(2))
        batch = make_batch(rng.fork("b"), h=2, obs_dim=2)
        with pytest.raises(ConfigError):
            loss_nmse_multistep(model, batch, 5)


class TestNll1Step:
    def make_model(self, rng, obs_dim=2, dt=0.01, smin=1e-4, smax=10.0):
        params = mlp_init(rng, [obs_dim + 1, 8, 2 * obs_dim], "swish")
        return StochasticModel(params, dt, unit_stats(obs_dim), smin, smax)

    def test_standard_normal_at_mode(self):
        # mu = target delta, effective sigma = 1 -> per-dim NLL = 0.5 ln 2pi
        obs_dim = 2
        # dt = 1 and raw head bias solved so bound_sigma(raw) = 1 exactly
        from scipy.optimize import brentq
        raw_for_one = brentq(
            lambda r: bound_sigma(np.array([r]), 1e-4, 10.0)[0] - 1.0, -5, 5)
        params = MlpParams([np.zeros((2 * obs_dim, obs_dim + 1))],
                           [np.concatenate([np.zeros(obs_dim),
                                            np.full(obs_dim, raw_for_one)])],
                           ())
        model = StochasticModel(params, 1.0, unit_stats(obs_dim), 1e-4, 10.0)
        start = np.zeros((3, obs_dim))
        batch = SubTrajectoryBatch(
            dt=1.0, start_obs=start, actions=np.zeros((3, 1, 1)),
            target_obs=start[:, None, :],  # delta = 0 = dt * mu
            starts=np.zeros((3, 2), dtype=np.int64))
        loss, _ = loss_nll_1step(model, batch)
        assert loss == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_matches_scipy_logpdf(self):
        # independent oracle: scipy's normal logpdf on the same moments
        from scipy.stats import norm
        rng = Rng(8)
        model = self.make_model(rng)
        batch = make_batch(rng.fork("b"), b=5, h=1, obs_dim=2)
        loss, _ = loss_nll_1step(model, batch)
        inp_obs = (batch.start_obs - model.stats.mean) / model.stats.cholesky
        from dynabench.numerics import mlp_apply
        out = mlp_apply(model.params,
                        np.concatenate([inp_obs, batch.actions[:, 0]], axis=1))
        mu = out[:, :2]
        sigma = bound_sigma(out[:, 2:], model.sigma_min, model.sigma_max)
        target = (batch.target_obs[:, 0] - batch.start_obs) / model.stats.cholesky
        ref = -norm.logpdf(target, loc=model.dt * mu,
                           scale=model.dt * sigma).mean()
        assert loss == pytest.approx(ref, rel=1e-12)

    def test_precision_tradeoff_convex_minimum_at_residual(self):
        # 1-D sweep oracle: NLL over log sigma is convex, min at |residual|
        residual = 0.35
        sigmas = np.exp(np.linspace(-3, 2, 201))
        nll = np.log(sigmas) + 0.5 * (residual / sigmas) ** 2
        i = int(np.argmin(nll))
        assert sigmas[i] == pytest.approx(residual, rel=0.05)
        diffs2 = np.diff(nll, 2)
        assert np.all(diffs2 > -1e-12)  # convex in log sigma
        # and decreasing sigma below the residual scale increases NLL
        below = sigmas < residual * 0.9
        assert np.all(np.diff(nll[below]) < 0)

    def test_grad_matches_fd_through_bounding(self):
        rng = Rng(9)
        model = self.make_model(rng, smin=1e-3, smax=2.0)
        batch = make_batch(rng.fork("b"), b=4, h=1, obs_dim=2)
        _, grads = loss_nll_1step(model, batch)
        numeric = fd_param_grads(lambda: loss_nll_1step(model, batch)[0],
                                 model)
        assert_grads_close(grads, numeric)

    def test_log_sigma_parameterization_grad(self):
        rng = Rng(10)
        params = mlp_init(rng, [3, 6, 4], "swish")
        model = StochasticModel(params, 0.02, unit_stats(2), 1e-4, 10.0,
                                sigma_param="log")
        batch = make_batch(rng.fork("b"), b=3, h=1, obs_dim=2)
        _, grads = loss_nll_1step(model, batch)
        numeric = fd_param_grads(lambda: loss_nll_1step(model, batch)[0],
                                 model)
        assert_grads_close(grads, numeric)


class TestInputNoise:
    def test_lambda_zero_identity(self, rng):
        batch = make_batch(rng)
        out = apply_input_noise(batch, 0.0, unit_stats(3), rng)
        assert out is batch

    def test_configured_amplitude_accepted(self):
        TrainConfig(loss="nll1", multistep_horizon=1, input_noise=5e-2)

    def test_monte_carlo_std(self):
        # empirical std of (noisy - clean) inputs ~ lambda * sqrt(var)
        lam = 0.3
        var = np.array([4.0, 0.25, 1.0])
        stats = DatasetStats(mean=np.zeros(3), variance=var,
                             cholesky=np.sqrt(var), count=10)
        rng = Rng(11)
        base = make_batch(rng.fork("b"), b=200, h=1)
        diffs = []
        noise_rng = rng.fork("noise")
        for i in range(500):
            noisy = apply_input_noise(base, lam, stats, noise_rng)
            diffs.append(noisy.start_obs - base.start_obs)
        got = np.concatenate(diffs).std(axis=0)
        assert np.allclose(got, lam * np.sqrt(var), rtol=0.03)

    def test_targets_untouched(self, rng):
        batch = make_batch(rng)
        noisy = apply_input_noise(batch, 0.5, unit_stats(3), rng.fork("n"))
        assert noisy.target_obs is batch.target_obs
        assert noisy.actions is batch.actions

    def test_multistep_noise_fresh_per_step(self):
        # same rng, H=2: the loss must differ from perturbing only the start
        # (fresh noise is injected at every unrolled network input)
        rng = Rng(12)
        model = DeterministicModel(mlp_init(rng, [3, 6, 2], "swish"), 0.05,
                                   unit_stats(2))
        batch = make_batch(rng.fork("b"), b=64, h=2, obs_dim=2)
        loss_a, _ = loss_nmse_multistep(model, batch, 2, input_noise=0.4,
                                        rng=Rng(100))
        noisy_start = apply_input_noise(batch, 0.4, model.stats,
                                        Rng(100).fork("once"))
        loss_b, _ = loss_nmse_multistep(model, noisy_start, 2)
        assert loss_a != pytest.approx(loss_b, rel=1e-9)

    def test_multistep_noisy_grad_matches_fd_fixed_noise(self):
        # with the rng stream fixed per call, the noisy loss is deterministic
        # and its gradient must still match finite differences
        rng = Rng(13)
        model = DeterministicModel(mlp_init(rng, [3, 5, 2], "swish"), 0.1,
                                   unit_stats(2))
        batch = make_batch(rng.fork("b"), b=3, h=2, obs_dim=2)

        def loss():
            return loss_nmse_multistep(model, batch, 2, input_noise=0.3,
                                       rng=Rng(77))[0]

        _, grads = loss_nmse_multistep(model, batch, 2, input_noise=0.3,
                                       rng=Rng(77))
        numeric = fd_param_grads(loss, model)
        assert_grads_close(grads, numeric)


class TestHorizonSchedule:
    def test_none_constant(self):
        assert all(horizon_schedule(u, 100, 7, "none") == 7 for u in range(100))

    def test_linear_endpoints(self):
        assert horizon_schedule(0, 100, 5, "linear") == 1
        assert horizon_schedule(99, 100, 5, "linear") == 5

    def test_linear_nondecreasing_hits_all(self):
        total, h = 137, 6
        seq = [horizon_schedule(u, total, h, "linear") for u in range(total)]
        assert all(b >= a for a, b in zip(seq, seq[1:]))
        assert set(seq) == set(range(1, h + 1))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            horizon_schedule(0, 10, 5, "cosine")


class TestTrainConfig:
    def test_h_forced_for_1step_losses(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss="nmse1", multistep_horizon=3)
        with pytest.raises(ConfigError):
            TrainConfig(loss="nll1", multistep_horizon=2)

    def test_stochastic_multistep_rejected(self):
        cfg = TrainConfig(loss="nmse_multi", multistep_horizon=5)
        model = make_model("stochastic", 1, [8], "swish", 0.01, unit_stats(2),
                           Rng(14))
        with pytest.raises(ConfigError):
            cfg.validate_model(model)

    def test_nll_requires_stochastic(self):
        cfg = TrainConfig(loss="nll1", multistep_horizon=1)
        model = make_model("deterministic", 1, [8], "swish", 0.01,
                           unit_stats(2), Rng(15))
        with pytest.raises(ConfigError):
            cfg.validate_model(model)


def small_dataset(rng, n=6, length=60):
    return Dataset([make_episode(rng.fork(f"ep{i}"), obs_dim=3, act_dim=1,
                                 length=length) for i in range(n)])


class TestTrainLoop:
    def test_zero_updates_keeps_initialization(self):
        rng = Rng(16)
        ds = small_dataset(rng.fork("d"))
        model = make_model("deterministic", 1, [8], "swish", 0.01,
                           compute_stats(ds), Rng(17))
        before = [a.copy() for a in model.params.arrays()]
        cfg = TrainConfig(loss="nmse1", multistep_horizon=1, updates=0,
                          batch_size=8, seed=0)
        train(model, ds, cfg)
        assert all(np.array_equal(a, b)
                   for a, b in zip(before, model.params.arrays()))

    def test_identical_seeds_bit_identical_params(self):
        rng = Rng(18)
        ds = small_dataset(rng.fork("d"))

        def run():
            model = make_model("deterministic", 1, [8, 8], "swish", 0.01,
                               compute_stats(ds), Rng(19), ensemble_size=2)
            cfg = TrainConfig(loss="nmse_multi", multistep_horizon=2,
                              updates=60, batch_size=16,
                              checkpoint_interval=30, seed=5)
            train(model, ds, cfg)
            return [a.copy() for m in model.members
                    for a in m.params.arrays()]

        a, b = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_loss_decreases_on_learnable_system(self, pendulum_dataset):
        train_ds, test_ds = split(pendulum_dataset, 0.2, Rng(20))
        stats = compute_stats(train_ds)
        spec = envs.make_env_spec("pendulum")
        model = make_model("deterministic", spec, [32, 32], "swish",
                           spec.dt_base, stats, Rng(21))
        cfg = TrainConfig(loss="nmse_multi", multistep_horizon=3,
                          batch_size=64, learning_rate=1e-3, updates=800,
                          checkpoint_interval=200, seed=3)
        _, curves = train(model, train_ds, cfg, test_ds=test_ds)
        rows = curves[0].rows
        assert rows[-1]["train_loss"] < 0.1 * rows[0]["train_loss"]
        assert rows[-1]["test_nmse"] < rows[0]["test_nmse"]

    def test_schedule_trace_recorded(self):
        rng = Rng(22)
        ds = small_dataset(rng.fork("d"))
        model = make_model("deterministic", 1, [8], "swish", 0.01,
                           compute_stats(ds), Rng(23))
        cfg = TrainConfig(loss="nmse_multi", multistep_horizon=4,
                          schedule="linear", updates=40, batch_size=8,
                          checkpoint_interval=20, seed=1)
        _, curves = train(model, ds, cfg)
        trans = curves[0].horizon_transitions
        hs = [h for _, h in trans]
        assert hs == sorted(hs)
        assert hs == [1, 2, 3, 4]

    def test_abort_on_divergence(self):
        rng = Rng(24)
        ds = small_dataset(rng.fork("d"))
        model = make_model("deterministic", 1, [8], "swish", 0.01,
                           compute_stats(ds), Rng(25))
        # absurd lr + no clipping forces a non-finite loss quickly
        cfg = TrainConfig(loss="nmse_multi", multistep_horizon=4,
                          learning_rate=1e18, grad_clip=0.0, updates=400,
                          batch_size=8, checkpoint_interval=100, seed=2)
        _, curves = train(model, ds, cfg)
        assert curves[0].aborted
        assert "non-finite" in curves[0].abort_reason

    def test_multistep_cost_scales_linearly(self, pendulum_dataset):
        train_ds, _ = split(pendulum_dataset, 0.2, Rng(26))
        stats = compute_stats(train_ds)
        spec = envs.make_env_spec("pendulum")

        def timing(h):
            model = make_model("deterministic", spec, [64, 64], "swish",
                               spec.dt_base, stats, Rng(27))
            cfg = TrainConfig(loss="nmse_multi", multistep_horizon=h,
                              batch_size=128, updates=1, seed=0)
            return measure_update_time(model, train_ds, cfg)

        t1 = timing(1)
        t10 = timing(10)
        assert t10 <= 12.0 * t1
