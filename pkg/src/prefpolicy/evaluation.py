"""Policy rollouts and the windowed checkpoint metric."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from prefpolicy.envs import Env, make_env
from prefpolicy.errors import ConfigError, MetricError
from prefpolicy.neural import PolicyParams, policy_mean

Policy = Union[PolicyParams, Callable[[np.ndarray], np.ndarray]]


def evaluate_policy(policy: Policy, env: Env | str, episodes: int = 200, rng_seed: int = 0) -> float:
    """Success rate of the deterministic policy mean over ``episodes`` resets.

    All episodes run as one batch; the only randomness is the reset draw.
    """
    env = make_env(env) if isinstance(env, str) else env
    if episodes < 1:
        raise ConfigError(f"need at least one evaluation episode, got {episodes}")
    spec = env.spec
    if isinstance(policy, PolicyParams):
        if policy.state_dim != spec.state_dim or policy.action_dim != spec.action_dim:
            raise ConfigError(
                f"policy dims ({policy.state_dim}, {policy.action_dim}) do not match "
                f"{spec.name} ({spec.state_dim}, {spec.action_dim})"
            )
        params = policy
        act = lambda s: policy_mean(params, s)  # noqa: E731
    else:
        act = policy
    states = env.reset(np.random.default_rng(rng_seed), episodes)
    success = np.zeros(episodes, dtype=bool)
    for _ in range(spec.horizon):
        action = np.clip(act(states), spec.action_low, spec.action_high)
        states, _, done = env.step(states, action)
        success |= np.asarray(done, dtype=bool)
    return float(success.mean())


def expert_policy(env: Env | str) -> Callable[[np.ndarray], np.ndarray]:
    """The noiseless scripted expert, wrapped as a state -> action policy."""
    env = make_env(env) if isinstance(env, str) else env
    return lambda s: env.expert_action(s, env.true_target(s))


def _windows(series: np.ndarray, window: int) -> np.ndarray:
    """Means of every length-``window`` run along the last axis."""
    c = np.cumsum(np.concatenate([np.zeros(series.shape[:-1] + (1,)), series], axis=-1), axis=-1)
    return (c[..., window:] - c[..., :-window]) / window


def windowed_metric(series, window: int = 8, aggregate: str = "seed_mean") -> float:
    """Best consecutive-``window`` checkpoint average.

    ``series`` is ``(n_seeds, n_checkpoints)``. ``seed_mean`` (default) averages
    seeds first, then takes the best window; ``per_seed`` takes each seed's best
    window and averages those.
    """
    arr = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if arr.shape[1] < window or window < 1:
        raise MetricError(f"need at least {window} checkpoints per seed, got {arr.shape[1]}")
    if aggregate == "seed_mean":
        return float(_windows(arr.mean(axis=0), window).max())
    if aggregate == "per_seed":
        return float(_windows(arr, window).max(axis=1).mean())
    raise ConfigError(f"unknown aggregate {aggregate!r}")


def best_window_stats(series, window: int = 8) -> tuple[float, float, int]:
    """(metric, std across seeds inside the best seed-mean window, window start index)."""
    arr = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if arr.shape[1] < window:
        raise MetricError(f"need at least {window} checkpoints per seed, got {arr.shape[1]}")
    start = int(np.argmax(_windows(arr.mean(axis=0), window)))
    per_seed = arr[:, start : start + window].mean(axis=1)
    return float(per_seed.mean()), float(per_seed.std()), start


@dataclass
class EvalRecord:
    env: str
    episodes: int
    steps: list[int]
    success: np.ndarray  # (n_seeds, n_checkpoints)
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.success = np.atleast_2d(np.asarray(self.success, dtype=np.float64))
        if self.episodes < 1:
            raise ConfigError("EvalRecord needs episodes >= 1")
        if np.any((self.success < 0) | (self.success > 1)):
            raise ConfigError("success rates must lie in [0, 1]")

    @property
    def mean(self) -> np.ndarray:
        return self.success.mean(axis=0)

    def metric(self, window: int = 8, aggregate: str = "seed_mean") -> float:
        return windowed_metric(self.success, window, aggregate)


def evaluate_checkpoints(checkpoints, env: Env | str, episodes: int = 200, rng_seed: int = 0) -> list[float]:
    """Success rate at each (step, params) checkpoint, all with the same reset seed."""
    return [evaluate_policy(p, env, episodes, rng_seed) for _, p in checkpoints]
