"""Desk-scale continuous-control tasks with hidden dense rewards.

States are flat float arrays so every function works on a single state of
shape ``(state_dim,)`` or a batch of shape ``(n, state_dim)``.

PointReach state: ``[agent_x, agent_y, goal_x, goal_y]``; action is a 2D
displacement.

DrawerPull state: ``[gripper_x, handle_x, extension, grasped]``; action is
``[dx, grip]`` where ``grip > 0`` closes the gripper. The drawer's closed
handle position is ``handle_x - extension * DRAWER_SPAN``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from prefpolicy.data import EpisodeDataset, Trajectory
from prefpolicy.errors import ConfigError, InputError

HORIZON = 100
ACTION_LIMIT = 0.1
ARENA = 1.0
REACH_RADIUS = 0.05
GRASP_RADIUS = 0.05
DRAWER_SPAN = 0.5
OPEN_THRESHOLD = 0.9
FRAME_SIZE = 64


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: float
    action_high: float
    horizon: int
    success: str
    reward: str
    task_description: str


class Env:
    spec: EnvSpec

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, states: np.ndarray, actions: np.ndarray):
        raise NotImplementedError

    def expert_action(self, states: np.ndarray, targets: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decoy_target(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def true_target(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def render(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if not np.all(np.isfinite(actions)):
            raise InputError(f"{self.spec.name}: non-finite action {actions!r}")
        if actions.shape[-1] != self.spec.action_dim or states.shape[-1] != self.spec.state_dim:
            raise ConfigError(
                f"{self.spec.name}: expected state dim {self.spec.state_dim} and action dim "
                f"{self.spec.action_dim}, got {states.shape} and {actions.shape}"
            )
        return states, np.clip(actions, self.spec.action_low, self.spec.action_high)


class PointReach(Env):
    spec = EnvSpec(
        name="point_reach",
        state_dim=4,
        action_dim=2,
        action_low=-ACTION_LIMIT,
        action_high=ACTION_LIMIT,
        horizon=HORIZON,
        success=f"agent within {REACH_RADIUS} of the goal",
        reward="negative Euclidean distance from agent to goal",
        task_description="to move the red dot onto the green target",
    )

    def reset(self, rng, n=None):
        size = 1 if n is None else n
        pos = rng.uniform(-ARENA, ARENA, size=(size, 2))
        goal = rng.uniform(-0.8, 0.8, size=(size, 2))
        states = np.concatenate([pos, goal], axis=1)
        return states[0] if n is None else states

    def step(self, states, actions):
        states, actions = self._check(states, actions)
        nxt = states.copy()
        nxt[..., :2] = np.clip(states[..., :2] + actions, -ARENA, ARENA)
        dist = np.linalg.norm(nxt[..., :2] - nxt[..., 2:], axis=-1)
        return nxt, -dist, dist < REACH_RADIUS

    def true_target(self, states):
        return np.asarray(states)[..., 2:4]

    def decoy_target(self, states):
        # goal mirrored through the arena centre: coherent but wrong
        return -np.asarray(states)[..., 2:4]

    def expert_action(self, states, targets):
        return np.clip(targets - np.asarray(states)[..., :2], -ACTION_LIMIT, ACTION_LIMIT)

    def render(self, state):
        img = _canvas()
        px = _to_px
        _disc(img, px(state[2]), px(-state[3]), 3, (40, 170, 60))
        _disc(img, px(state[0]), px(-state[1]), 3, (210, 40, 40))
        return img


class DrawerPull(Env):
    spec = EnvSpec(
        name="drawer_pull",
        state_dim=4,
        action_dim=2,
        action_low=-ACTION_LIMIT,
        action_high=ACTION_LIMIT,
        horizon=HORIZON,
        success=f"drawer extension above {OPEN_THRESHOLD}",
        reward="-|gripper - handle| while ungrasped, extension while grasped",
        task_description="to open the drawer",
    )

    def reset(self, rng, n=None):
        size = 1 if n is None else n
        gripper = rng.uniform(-ARENA, ARENA, size=size)
        handle = rng.uniform(-0.4, 0.0, size=size)
        states = np.stack([gripper, handle, np.zeros(size), np.zeros(size)], axis=1)
        return states[0] if n is None else states

    def step(self, states, actions):
        states, actions = self._check(states, actions)
        g, h, d, grasped = (states[..., i] for i in range(4))
        dx, grip = actions[..., 0], actions[..., 1]
        closed = h - d * DRAWER_SPAN
        hold = (grasped > 0.5) & (grip > 0)
        g_free = np.clip(g + dx, -ARENA, ARENA)
        h_held = np.clip(g + dx, closed, closed + DRAWER_SPAN)
        new_h = np.where(hold, h_held, h)
        new_g = np.where(hold, h_held, g_free)
        new_d = (new_h - closed) / DRAWER_SPAN
        new_grasp = hold | ((grasped < 0.5) & (grip > 0) & (np.abs(new_g - new_h) < GRASP_RADIUS))
        nxt = np.stack([new_g, new_h, new_d, new_grasp.astype(np.float64)], axis=-1)
        reward = np.where(new_grasp, new_d, -np.abs(new_g - new_h))
        return nxt, reward, new_d > OPEN_THRESHOLD

    def true_target(self, states):
        return np.asarray(states)[..., 1]

    def decoy_target(self, states):
        # stops short of the handle and tries to grasp empty space
        return np.asarray(states)[..., 1] - 0.35

    def expert_action(self, states, targets):
        states = np.asarray(states)
        g, grasped = states[..., 0], states[..., 3] > 0.5
        near = np.abs(targets - g) < 0.5 * GRASP_RADIUS
        dx = np.where(grasped, ACTION_LIMIT, np.clip(targets - g, -ACTION_LIMIT, ACTION_LIMIT))
        grip = np.where(grasped | near, ACTION_LIMIT, -ACTION_LIMIT)
        return np.stack([dx, grip], axis=-1)

    def render(self, state):
        img = _canvas()
        g, h, d, grasped = state
        closed = h - d * DRAWER_SPAN
        left = _to_px(closed - 0.4)
        width = _to_px(closed) - left + drawer_extension_px(d)
        img[30:40, left : left + width] = (150, 100, 50)
        img[28:42, left + width : left + width + 3] = (30, 30, 160)
        gx = _to_px(g)
        color = (240, 140, 0) if grasped > 0.5 else (210, 40, 40)
        img[18:26, max(gx - 2, 0) : gx + 3] = color
        return img


def drawer_extension_px(d: float) -> int:
    return int(round(float(d) * DRAWER_SPAN * (FRAME_SIZE - 1) / (2 * ARENA)))


def _canvas() -> np.ndarray:
    return np.full((FRAME_SIZE, FRAME_SIZE, 3), 235, dtype=np.uint8)


def _to_px(x: float) -> int:
    return int(np.clip(round((float(x) + ARENA) / (2 * ARENA) * (FRAME_SIZE - 1)), 0, FRAME_SIZE - 1))


def _disc(img, cx, cy, r, color):
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE]
    img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = color


ENVS = {"point_reach": PointReach, "drawer_pull": DrawerPull}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise ConfigError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def env_reset(env: Env | str, rng: np.random.Generator) -> np.ndarray:
    env = make_env(env) if isinstance(env, str) else env
    return env.reset(rng)


def env_step(env: Env | str, state, action):
    """Single transition: returns (next_state, true_reward, success_flag)."""
    env = make_env(env) if isinstance(env, str) else env
    nxt, reward, done = env.step(state, action)
    if np.ndim(reward) == 0:
        return nxt, float(reward), bool(done)
    return nxt, reward, done


def render_frame(env: Env | str, state) -> np.ndarray:
    env = make_env(env) if isinstance(env, str) else env
    return env.render(np.asarray(state, dtype=np.float64))


def to_ppm(raster: np.ndarray) -> bytes:
    h, w, _ = raster.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raster, dtype=np.uint8).tobytes()


def scripted_collect(
    env: Env | str,
    episodes: int,
    expert_noise: float = 0.01,
    failure_rate: float = 0.5,
    rng_seed: int = 0,
    render: bool = True,
    segment_length: int = 16,
) -> EpisodeDataset:
    """Roll out a proportional-controller expert; with probability ``failure_rate``
    an episode's controller chases a decoy target instead of the true one."""
    env = make_env(env) if isinstance(env, str) else env
    if episodes <= 0:
        raise ConfigError(f"episodes must be positive, got {episodes}")
    if not 0.0 <= failure_rate <= 1.0:
        raise ConfigError(f"failure rate must lie in [0, 1], got {failure_rate}")
    if expert_noise < 0:
        raise ConfigError(f"expert noise must be non-negative, got {expert_noise}")
    rng = np.random.default_rng(rng_seed)
    spec = env.spec
    states = env.reset(rng, episodes)
    fail = rng.random(episodes) < failure_rate
    targets = np.where(
        fail[:, None] if spec.name == "point_reach" else fail,
        env.decoy_target(states),
        env.true_target(states),
    )
    H = spec.horizon
    S = np.empty((H, episodes, spec.state_dim))
    A = np.empty((H, episodes, spec.action_dim))
    R = np.empty((H, episodes))
    success = np.zeros(episodes, dtype=bool)
    for t in range(H):
        act = env.expert_action(states, targets)
        act = np.clip(act + expert_noise * rng.standard_normal(act.shape), spec.action_low, spec.action_high)
        S[t], A[t] = states, act
        states, reward, done = env.step(states, act)
        R[t] = reward
        success |= done
    trajs = [
        Trajectory(S[:, i], A[:, i], R[:, i], success[i], index=i, has_frames=render) for i in range(episodes)
    ]
    meta = {
        "env": spec.name,
        "L": segment_length,
        "seed": rng_seed,
        "expert_noise": expert_noise,
        "failure_rate": failure_rate,
    }
    return EpisodeDataset(trajs, meta)
