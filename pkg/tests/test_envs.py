import numpy as np
import pytest

from dynabench import envs
from dynabench.errors import ConfigError, NumericError
from dynabench.numerics import Rng


@pytest.fixture(params=["pendulum", "cartpole_swingup", "reacher2"])
def spec(request):
    return envs.make_env_spec(request.param)


class TestDynamicsStep:
    def test_pendulum_equilibrium_fixed_point(self):
        spec = envs.make_env_spec("pendulum")
        s0 = np.zeros(2)
        s1 = envs.dynamics_step(spec, s0, np.zeros(1), 0.01)
        assert np.max(np.abs(s1 - s0)) < 1e-9

    def test_pendulum_energy_conservation(self):
        # oracle: total energy is invariant with damping and torque at zero
        spec = envs.make_env_spec("pendulum", {"damping": 0.0})
        s = np.array([1.2, 0.0])
        e0 = envs.pendulum_energy(spec, s)
        for _ in range(1000):
            s = envs.dynamics_step(spec, s, np.zeros(1), 0.01)
        assert abs(envs.pendulum_energy(spec, s) - e0) / abs(e0) < 1e-5

    def test_cartpole_mirror_symmetry(self):
        spec = envs.make_env_spec("cartpole_swingup")
        rng = Rng(3)
        s = rng.gaussian(4) * np.array([0.5, 2.0, 0.5, 1.0])
        f = np.array([0.7])
        traj_a, traj_b = s.copy(), -s.copy()
        for _ in range(50):
            traj_a = envs.dynamics_step(spec, traj_a, f, 0.01)
            traj_b = envs.dynamics_step(spec, traj_b, -f, 0.01)
            assert np.array_equal(traj_a, -traj_b)

    def test_substep_composition(self, spec):
        # k short steps == one k-times-longer step (identical substep grid)
        rng = Rng(4)
        s = rng.gaussian(spec.state_dim) * 0.3
        a = np.clip(rng.gaussian(spec.act_dim), -1, 1)
        s_chain = s.copy()
        for _ in range(4):
            s_chain = envs.dynamics_step(spec, s_chain, a, 0.01)
        s_once = envs.dynamics_step(spec, s, a, 0.04)
        assert np.allclose(s_chain, s_once, atol=1e-12, rtol=0)

    def test_dt_bounds(self, spec):
        with pytest.raises(ConfigError):
            envs.dynamics_step(spec, np.zeros(spec.state_dim),
                               np.zeros(spec.act_dim), 0.2)
        with pytest.raises(ConfigError):
            envs.dynamics_step(spec, np.zeros(spec.state_dim),
                               np.zeros(spec.act_dim), 0.0)

    def test_non_finite_state_rejected(self, spec):
        s = np.full(spec.state_dim, np.nan)
        with pytest.raises(NumericError):
            envs.dynamics_step(spec, s, np.zeros(spec.act_dim), 0.01)

    def test_batched_matches_single(self, spec):
        rng = Rng(5)
        states = rng.gaussian((6, spec.state_dim)) * 0.5
        actions = np.clip(rng.gaussian((6, spec.act_dim)), -1, 1)
        batched = envs.dynamics_step(spec, states, actions, 0.01)
        for i in range(6):
            single = envs.dynamics_step(spec, states[i], actions[i], 0.01)
            assert np.array_equal(batched[i], single)


class TestObserve:
    def test_angle_zero(self):
        spec = envs.make_env_spec("pendulum")
        obs = envs.observe(spec, np.array([0.0, 0.3]))
        assert obs[0] == 0.0 and obs[1] == 1.0 and obs[2] == 0.3

    def test_manifold_constraint(self, spec):
        rng = Rng(6)
        states = rng.gaussian((100, spec.state_dim)) * 3.0
        obs = envs.observe(spec, states)
        j = 0
        for i in range(spec.state_dim):
            if i in spec.angle_indices:
                ss = obs[:, j] ** 2 + obs[:, j + 1] ** 2
                assert np.max(np.abs(ss - 1.0)) < 1e-12
                j += 2
            else:
                j += 1

    def test_reconstruction_inverse(self, spec):
        # inverse-map oracle: observe then reconstruct recovers state mod 2pi
        rng = Rng(7)
        states = rng.gaussian((50, spec.state_dim)) * 4.0
        rec = envs.reconstruct_state(spec, envs.observe(spec, states))
        for i in range(spec.state_dim):
            if i in spec.angle_indices:
                d = np.angle(np.exp(1j * (states[:, i] - rec[:, i])))
                assert np.max(np.abs(d)) < 1e-9
            else:
                assert np.allclose(rec[:, i], states[:, i], atol=0)

    def test_obs_dim(self, spec):
        obs = envs.observe(spec, np.zeros(spec.state_dim))
        assert obs.shape == (spec.obs_dim,)


class TestReward:
    @pytest.fixture(params=[("pendulum", "swingup"), ("pendulum", "spin"),
                            ("cartpole_swingup", "swingup"),
                            ("cartpole_swingup", "balance"),
                            ("reacher2", "reach_a"), ("reacher2", "reach_b")])
    def env_task(self, request):
        name, task = request.param
        return envs.make_env_spec(name), envs.make_reward_fn(name, task)

    def test_goal_state_maximal(self, env_task):
        spec, rf = env_task
        goal = envs.goal_state(spec, rf)
        assert envs.reward(spec, rf, goal, np.zeros(spec.act_dim)) == \
            pytest.approx(1.0, abs=1e-9)

    def test_bounded(self, env_task):
        spec, rf = env_task
        rng = Rng(8)
        states = rng.gaussian((200, spec.state_dim)) * 5.0
        actions = np.clip(rng.gaussian((200, spec.act_dim)), -1, 1)
        r = envs.reward(spec, rf, states, actions)
        assert np.all(r >= 0.0) and np.all(r <= 1.0)

    def test_angle_wrap_invariance(self, env_task):
        spec, rf = env_task
        rng = Rng(9)
        states = rng.gaussian((20, spec.state_dim))
        shifted = states.copy()
        for i in spec.angle_indices:
            shifted[:, i] += 2 * np.pi
        a = np.zeros((20, spec.act_dim))
        assert np.allclose(envs.reward(spec, rf, states, a),
                           envs.reward(spec, rf, shifted, a), atol=1e-12)

    def test_swingup_reward_low_at_hanging(self):
        # evaluate the closed form at the antipodal configuration
        spec = envs.make_env_spec("pendulum")
        rf = envs.make_reward_fn("pendulum", "swingup")
        assert envs.reward(spec, rf, np.zeros(2), np.zeros(1)) < 0.1
        cp = envs.make_env_spec("cartpole_swingup")
        rfc = envs.make_reward_fn("cartpole_swingup", "swingup")
        hanging = np.array([0.0, np.pi, 0.0, 0.0])
        assert envs.reward(cp, rfc, hanging, np.zeros(1)) < 0.1


class TestReset:
    def test_deterministic(self, spec):
        a = envs.reset(spec, Rng(10))
        b = envs.reset(spec, Rng(10))
        assert np.array_equal(a, b)

    def test_within_declared_bounds(self, spec):
        nominal, halfwidth = envs._RESET[spec.name]
        rng = Rng(11)
        for i in range(10_000):
            s = envs.reset(spec, rng.fork(f"r{i}"))
            assert np.all(np.abs(s - nominal) <= halfwidth + 1e-12)

    def test_zero_noise_exact_nominal(self, spec):
        quiet = envs.make_env_spec(spec.name, {"init_noise": 0.0})
        nominal, _ = envs._RESET[spec.name]
        assert np.array_equal(envs.reset(quiet, Rng(12)), nominal)


class TestRunEpisode:
    def test_equilibrium_constant_observations(self):
        spec = envs.make_env_spec("pendulum", {"init_noise": 0.0})
        rf = envs.make_reward_fn("pendulum", "swingup")
        ep = envs.run_episode(spec, rf, lambda obs, t: np.zeros(1), 50, Rng(13))
        assert np.allclose(ep.observations, ep.observations[0], atol=1e-12)

    def test_rewards_bounded(self, spec):
        rf = envs.make_reward_fn(spec.name, envs.ENV_TASKS[spec.name][0])
        rng = Rng(14)
        ep = envs.run_episode(
            spec, rf, lambda obs, t: rng.uniform(-2, 2, spec.act_dim), 60,
            Rng(15))
        assert np.all(ep.rewards >= 0) and np.all(ep.rewards <= 1)
        assert np.all(np.abs(ep.actions) <= 1.0)  # clamped before stepping

    def test_replay_consistency(self, spec):
        # recorded next obs equals observe(dynamics_step(state_i, action_i))
        rf = envs.make_reward_fn(spec.name, envs.ENV_TASKS[spec.name][0])
        rng = Rng(16)
        ep = envs.run_episode(
            spec, rf, lambda obs, t: rng.uniform(-1, 1, spec.act_dim), 40,
            Rng(17))
        state = envs.reset(spec, Rng(17).fork("reset"))
        for t in range(ep.length):
            assert np.allclose(envs.observe(spec, state), ep.observations[t],
                               atol=1e-9)
            state = envs.dynamics_step(spec, state, ep.actions[t], spec.dt_base)
        assert np.allclose(envs.observe(spec, state), ep.observations[-1],
                           atol=1e-9)

    def test_non_finite_policy_rejected(self, spec):
        rf = envs.make_reward_fn(spec.name, envs.ENV_TASKS[spec.name][0])
        with pytest.raises(NumericError):
            envs.run_episode(spec, rf,
                             lambda obs, t: np.full(spec.act_dim, np.nan),
                             10, Rng(18))


class TestRegistry:
    def test_addressable_by_name(self):
        for name in ("pendulum", "cartpole_swingup", "reacher2"):
            assert envs.make_env_spec(name).name == name

    def test_unknown_env(self):
        with pytest.raises(ConfigError):
            envs.make_env_spec("walker")

    def test_constant_override(self):
        spec = envs.make_env_spec("pendulum", {"torque_scale": 9.0})
        assert spec.constants["torque_scale"] == 9.0

    def test_unknown_constant_rejected(self):
        with pytest.raises(ConfigError):
            envs.make_env_spec("pendulum", {"masss": 2.0})

    def test_obs_dim_exceeds_state_dim(self):
        # over-parameterization: every angle adds one extra dimension
        for name in ("pendulum", "cartpole_swingup", "reacher2"):
            spec = envs.make_env_spec(name)
            assert spec.obs_dim == spec.state_dim + len(spec.angle_indices)
