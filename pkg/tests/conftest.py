import numpy as np
import pytest

from dynabench import envs
from dynabench.dataset import Dataset, Episode, compute_stats
from dynabench.numerics import Rng


def make_episode(rng, obs_dim=3, act_dim=1, length=40, dt=0.01):
    """Synthetic episode with finite values and rewards in [0, 1]."""
    obs = np.cumsum(rng.gaussian((length + 1, obs_dim)) * 0.1, axis=0)
    actions = np.clip(rng.gaussian((length, act_dim)) * 0.5, -1, 1)
    rewards = 1.0 / (1.0 + np.exp(-rng.gaussian(length)))
    return Episode(dt=dt, observations=obs, actions=actions, rewards=rewards)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def synth_dataset():
    r = Rng(99)
    return Dataset([make_episode(r.fork(f"ep{i}")) for i in range(8)])


@pytest.fixture(scope="session")
def pendulum_dataset():
    """Small real pendulum dataset shared by training/eval tests."""
    spec = envs.make_env_spec("pendulum")
    rf = envs.make_reward_fn("pendulum", "swingup")
    collectors = [{"kind": "random", "episodes": 12},
                  {"kind": "smoothed", "episodes": 8}]
    from dynabench.dataset import collect_dataset
    return collect_dataset(spec, rf, collectors, Rng(7), episode_length=300)
