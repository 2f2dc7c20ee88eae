import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prefpolicy.data import EpisodeDataset, Trajectory
from prefpolicy.envs import scripted_collect

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(rng, n_episodes=5, horizon=20, state_dim=4, action_dim=2, frames=False):
    eps = []
    for i in range(n_episodes):
        h = horizon if np.isscalar(horizon) else int(horizon[i])
        eps.append(
            Trajectory(
                rng.normal(size=(h, state_dim)),
                rng.uniform(-0.1, 0.1, size=(h, action_dim)),
                rng.normal(size=h),
                bool(rng.random() < 0.5),
                index=i,
                has_frames=frames,
            )
        )
    return EpisodeDataset(eps, {"env": "point_reach", "seed": 0})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_reach():
    return scripted_collect("point_reach", 40, 0.01, 0.5, rng_seed=3)


@pytest.fixture(scope="session")
def small_drawer():
    return scripted_collect("drawer_pull", 40, 0.01, 0.5, rng_seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        terminalreporter.write_line(results.get(n, f"criterion {n}: FAIL  (not run in this session, or errored before reporting)"))
