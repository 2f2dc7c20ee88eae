"""MLP Gaussian policy, dropout, Adam, and checkpoints on top of :mod:`autodiff`."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from prefpolicy.autodiff import Tensor, parameter
from prefpolicy.errors import ConfigError, InputError, TrainingError
from prefpolicy.storage import CHECKPOINT_MAGIC, read_container, write_container

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PolicyParams:
    """Weights of a tanh MLP producing the action mean, plus a state-independent log-std.

    With ``mean_scale > 0`` the mean head is squashed to ``mean_scale * tanh(.)``;
    0 keeps it linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_std: np.ndarray
    mean_scale: float = 0.0

    @classmethod
    def init(
        cls, state_dim: int, action_dim: int, hidden=(256, 256), rng=None, log_std: float = 0.0,
        mean_scale: float = 0.0,
    ):
        if mean_scale < 0:
            raise ConfigError(f"mean_scale must be >= 0, got {mean_scale}")
        rng = np.random.default_rng(rng)
        sizes = [state_dim, *hidden, action_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, np.full(action_dim, float(log_std)), float(mean_scale))

    @property
    def state_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def action_dim(self) -> int:
        return self.log_std.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.log_std]

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.weights)):
            out += [f"W{i}", f"b{i}"]
        return out + ["log_std"]

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], mean_scale: float = 0.0) -> "PolicyParams":
        *layers, log_std = arrays
        return cls(list(layers[0::2]), list(layers[1::2]), log_std, float(mean_scale))

    def copy(self) -> "PolicyParams":
        return PolicyParams.from_arrays([a.copy() for a in self.arrays()], self.mean_scale)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def norms(self) -> dict[str, float]:
        return {n: float(np.linalg.norm(a)) for n, a in zip(self.names(), self.arrays())}


def apply_dropout(h, p_drop: float, rng: np.random.Generator | None):
    """Inverted dropout. ``rng=None`` means evaluation mode (identity)."""
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p_drop}")
    if rng is None or p_drop == 0.0:
        return h
    shape = h.shape if isinstance(h, Tensor) else np.shape(h)
    dtype = h.data.dtype if isinstance(h, Tensor) else np.asarray(h).dtype
    if dtype.kind != "f":
        dtype = np.float64
    mask = (rng.random(shape, dtype=dtype) >= p_drop).astype(dtype) * dtype.type(1.0 / (1.0 - p_drop))
    return h * mask


def forward_mean(tparams: list[Tensor], states, p_drop: float = 0.0, rng=None, mean_scale: float = 0.0) -> Tensor:
    """Policy mean on the tape. ``tparams`` is the flat tensor list from :func:`as_tensors`."""
    *layers, _ = tparams
    h = Tensor(states) if not isinstance(states, Tensor) else states
    n_layers = len(layers) // 2
    for i in range(n_layers):
        h = h @ layers[2 * i] + layers[2 * i + 1]
        if i < n_layers - 1:
            h = apply_dropout(h.tanh(), p_drop, rng)
    if mean_scale > 0:
        h = h.tanh() * mean_scale
    return h


def as_tensors(params: PolicyParams, dtype=np.float64) -> list[Tensor]:
    return [parameter(a, dtype) for a in params.arrays()]


def gaussian_log_prob_tape(
    tparams: list[Tensor], states, actions, p_drop: float = 0.0, rng=None, mean_scale: float = 0.0
) -> Tensor:
    """Per-row diagonal-Gaussian log-density, shape ``(n,)``."""
    dtype = tparams[-1].data.dtype
    states = np.asarray(states, dtype=dtype)
    actions = np.asarray(actions, dtype=dtype)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise InputError("non-finite state or action passed to the policy")
    log_std = tparams[-1]
    mean = forward_mean(tparams, states, p_drop, rng, mean_scale)
    z = (Tensor(actions) - mean) * (-log_std).exp()
    k = actions.shape[-1]
    return z.square().sum(axis=-1) * -0.5 - log_std.sum() - 0.5 * k * LOG_2PI


def gaussian_log_prob(params: PolicyParams, s, a, p_drop: float = 0.0, rng=None) -> Tensor:
    """log pi(a|s); returns a scalar tensor for a single (s, a) and a vector for batches."""
    single = np.ndim(s) == 1
    s2 = np.atleast_2d(s)
    a2 = np.atleast_2d(a)
    if s2.shape[-1] != params.state_dim or a2.shape[-1] != params.action_dim:
        raise ConfigError(
            f"policy expects state dim {params.state_dim} / action dim {params.action_dim}, "
            f"got {s2.shape[-1]} / {a2.shape[-1]}"
        )
    out = gaussian_log_prob_tape(as_tensors(params), s2, a2, p_drop, rng, params.mean_scale)
    return out.reshape(()) if single else out


def policy_mean(params: PolicyParams, states) -> np.ndarray:
    """Deterministic evaluation-mode forward pass (no tape, no dropout)."""
    h = np.asarray(states, dtype=np.float64)
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n - 1:
            h = np.tanh(h)
    if params.mean_scale > 0:
        h = np.tanh(h) * params.mean_scale
    return h


def backward(loss: Tensor, tparams: list[Tensor]) -> list[np.ndarray]:
    """Run reverse mode from a scalar loss; returns one gradient per parameter tensor."""
    if not np.all(np.isfinite(loss.data)):
        norms = ", ".join(f"{i}:{np.linalg.norm(t.data):.3g}" for i, t in enumerate(tparams))
        raise TrainingError(f"non-finite loss {loss.data!r}; parameter norms {norms}")
    for t in tparams:
        t.grad = None
    loss.backward()
    return [np.zeros(t.data.shape) if t.grad is None else t.grad.astype(np.float64) for t in tparams]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, arrays: list[np.ndarray], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kw)


def adam_step(arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ConfigError("parameter, gradient and moment lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints ------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, params: PolicyParams, adam: AdamState, step: int, config: dict) -> None:
    arrays = params.arrays()
    header = {
        "kind": "checkpoint",
        "step": int(step),
        "config_hash": config_hash(config),
        "shapes": [list(a.shape) for a in arrays],
        "mean_scale": params.mean_scale,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "payload_count": 3 * sum(a.size for a in arrays),
    }
    write_container(path, CHECKPOINT_MAGIC, header, arrays + adam.m + adam.v, dtype="<f8")


def load_checkpoint(path) -> tuple[PolicyParams, AdamState, int, dict]:
    header, flat = read_container(path, CHECKPOINT_MAGIC)
    chunks, pos = [], 0
    for _ in range(3):
        for shape in header["shapes"]:
            size = int(np.prod(shape))
            chunks.append(flat[pos : pos + size].reshape(shape))
            pos += size
    n = len(header["shapes"])
    params = PolicyParams.from_arrays(chunks[:n], header.get("mean_scale", 0.0))
    adam = AdamState(**header["adam"], m=chunks[n : 2 * n], v=chunks[2 * n :])
    return params, adam, header["step"], header
