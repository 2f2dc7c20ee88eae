"""Contrastive preference objective, behavior cloning, and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from prefpolicy.autodiff import Tensor
from prefpolicy.data import EpisodeDataset, PreferenceDataset, PreferencePair, Segment
from prefpolicy.errors import ConfigError, TrainingError
from prefpolicy.neural import (
    AdamState,
    PolicyParams,
    adam_step,
    as_tensors,
    backward,
    gaussian_log_prob_tape,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "grad_norm", "wall_ms")


@dataclass
class CplConfig:
    objective: str = "cpl"
    alpha: float = 0.1
    lam: float = 0.5
    gamma: float = 0.99
    include_equal: bool = False
    p_drop: float = 0.25
    batch_size: int = 64
    bc_batch_size: int = 1024
    total_steps: int = 500_000
    bc_warmup_steps: int = 0
    lr: float = 1e-4
    checkpoint_every: int = 5000
    log_every: int = 100
    hidden: tuple = (256, 256)
    init_log_std: float = 0.0
    # both toy envs bound actions to +-0.1; 0 gives an unbounded linear mean head
    mean_scale: float = 0.1
    compute_dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.objective not in ("cpl", "bc"):
            raise ConfigError(f"objective must be 'cpl' or 'bc', got {self.objective!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0 <= self.p_drop < 1:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p_drop}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ConfigError(f"compute_dtype must be float32 or float64, got {self.compute_dtype!r}")
        if self.mean_scale < 0:
            raise ConfigError(f"mean_scale must be >= 0, got {self.mean_scale}")
        if self.bc_warmup_steps < 0:
            raise ConfigError(f"bc_warmup_steps must be >= 0, got {self.bc_warmup_steps}")
        if self.total_steps < 0 or self.checkpoint_every < 1 or self.batch_size < 1:
            raise ConfigError("total_steps must be >= 0; checkpoint_every and batch_size >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


# -- objective ----------------------------------------------------------------------


def discount_weights(length: int, alpha: float, gamma: float) -> np.ndarray:
    return alpha * gamma ** np.arange(length, dtype=np.float64)


def segment_scores(tparams, states, actions, alpha, gamma, p_drop=0.0, rng=None, mean_scale=0.0) -> Tensor:
    """Discounted, temperature-scaled log-likelihood of each segment, shape ``(B,)``.

    ``states``/``actions`` are ``(B, L, dim)``; the discount restarts at each segment start.
    """
    B, L = states.shape[:2]
    logp = gaussian_log_prob_tape(
        tparams, states.reshape(B * L, -1), actions.reshape(B * L, -1), p_drop, rng, mean_scale
    ).reshape(B, L)
    if not np.all(np.isfinite(logp.data)):
        raise TrainingError("non-finite log-probability inside a segment score")
    return (logp * discount_weights(L, alpha, gamma).astype(logp.data.dtype)).sum(axis=1)


def segment_score(params: PolicyParams, seg: Segment, alpha: float, gamma: float, p_drop=0.0, rng=None) -> Tensor:
    if seg.length < 1:
        raise ConfigError("segment length must be >= 1")
    return segment_scores(
        as_tensors(params), seg.states[None].astype(np.float64), seg.actions[None].astype(np.float64),
        alpha, gamma, p_drop, rng, params.mean_scale,
    ).reshape(())


def cpl_loss_from_scores(s1: Tensor, s2: Tensor, labels, lam: float) -> Tensor:
    """Mean of -[(1-y) h(1,2) + y h(2,1)] with h(i,j) = -softplus(lam*s_j - s_i)."""
    s1 = s1 if isinstance(s1, Tensor) else Tensor(s1)
    s2 = s2 if isinstance(s2, Tensor) else Tensor(s2)
    if not (np.all(np.isfinite(s1.data)) and np.all(np.isfinite(s2.data))):
        raise TrainingError("non-finite segment score")
    y = np.asarray(labels, dtype=np.float64)
    per_pair = (s2 * lam - s1).softplus() * (1.0 - y) + (s1 * lam - s2).softplus() * y
    return per_pair.mean()


def cpl_pair_loss(params: PolicyParams, pair: PreferencePair, config: CplConfig, rng=None) -> Tensor:
    tp = as_tensors(params)
    states = np.stack([pair.seg_a.states, pair.seg_b.states]).astype(np.float64)
    actions = np.stack([pair.seg_a.actions, pair.seg_b.actions]).astype(np.float64)
    s = segment_scores(
        tp, states, actions, config.alpha, config.gamma, config.p_drop if rng is not None else 0.0, rng,
        params.mean_scale,
    )
    return cpl_loss_from_scores(s[0:1], s[1:2], [pair.label], config.lam)


def cpl_batch_loss(tparams, states_a, actions_a, states_b, actions_b, labels, config: CplConfig, rng=None) -> Tensor:
    """Both segments go through one forward pass so one dropout mask stream covers the batch."""
    B = len(labels)
    scores = segment_scores(
        tparams,
        np.concatenate([states_a, states_b]),
        np.concatenate([actions_a, actions_b]),
        config.alpha,
        config.gamma,
        config.p_drop if rng is not None else 0.0,
        rng,
        config.mean_scale,
    )
    return cpl_loss_from_scores(scores[:B], scores[B:], labels, config.lam)


def bc_loss(tparams, states, actions, p_drop=0.0, rng=None, mean_scale=0.0) -> Tensor:
    """Mean negative log-likelihood of dataset actions."""
    if len(states) == 0:
        raise ConfigError("behavior cloning batch is empty")
    loss = -gaussian_log_prob_tape(tparams, states, actions, p_drop, rng, mean_scale).mean()
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite behavior cloning loss")
    return loss


def filter_equal(dataset: PreferenceDataset) -> tuple[PreferenceDataset, float]:
    """Drop equal-preference records; returns the filtered set and the removed fraction."""
    kept = [p for p in dataset.pairs if p.label != 0.5]
    removed = 1.0 - len(kept) / len(dataset) if len(dataset) else 0.0
    if dataset.pairs and not kept:
        log.warning("every record is an equal preference; nothing left to train on")
    meta = dict(dataset.metadata, equal_removed=removed)
    return PreferenceDataset(kept, meta), removed


def pair_arrays(dataset: PreferenceDataset):
    sa = np.stack([p.seg_a.states for p in dataset.pairs]).astype(np.float64)
    aa = np.stack([p.seg_a.actions for p in dataset.pairs]).astype(np.float64)
    sb = np.stack([p.seg_b.states for p in dataset.pairs]).astype(np.float64)
    ab = np.stack([p.seg_b.actions for p in dataset.pairs]).astype(np.float64)
    return sa, aa, sb, ab, dataset.labels


# -- loop -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoints: list[tuple[int, PolicyParams]] = field(default_factory=list)
    log_rows: list[tuple] = field(default_factory=list)
    wall_seconds: float = 0.0
    params: PolicyParams | None = None
    adam: AdamState | None = None


def train(data, config: CplConfig, state_dim: int, action_dim: int, out_dir=None) -> TrainResult:
    """Batched Adam on the CPL objective (``PreferenceDataset``) or BC (``EpisodeDataset``).

    Checkpoints are kept in memory and, when ``out_dir`` is given, written as
    ``ckpt_<step>.ppc`` next to ``train_log.csv``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if config.objective == "cpl":
        if not isinstance(data, PreferenceDataset):
            raise ConfigError("the CPL objective needs a preference dataset")
        if len(data) == 0:
            raise ConfigError("preference dataset is empty")
        # warm-start pool: every transition of every labeled segment, before filtering
        full = pair_arrays(data)
        d, k = full[0].shape[-1], full[1].shape[-1]
        warm = (
            np.concatenate([full[0].reshape(-1, d), full[2].reshape(-1, d)]),
            np.concatenate([full[1].reshape(-1, k), full[3].reshape(-1, k)]),
        )
        if not config.include_equal:
            data, _ = filter_equal(data)
        if len(data) == 0:
            raise ConfigError("preference dataset is empty after filtering")
        arrays = pair_arrays(data)
        n_items = len(data)
    else:
        if isinstance(data, PreferenceDataset):
            raise ConfigError("behavior cloning needs an episode dataset")
        if len(data) == 0:
            raise ConfigError("episode dataset is empty")
        states, actions = data.transitions()
        arrays = (states.astype(np.float64), actions.astype(np.float64))
        n_items = len(states)
        warm = None

    dtype = np.dtype(config.compute_dtype)
    arrays = tuple(a.astype(dtype) for a in arrays)
    if warm is not None:
        warm = tuple(a.astype(dtype) for a in warm)
    params = PolicyParams.init(
        state_dim, action_dim, config.hidden, rng=np.random.default_rng([config.seed, 0]),
        log_std=config.init_log_std, mean_scale=config.mean_scale,
    )
    adam = AdamState.for_params(params.arrays(), lr=config.lr)
    batch_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    result = TrainResult(params=params, adam=adam)
    cfg = config.as_dict()

    def checkpoint(step):
        result.checkpoints.append((step, params.copy()))
        if out_dir is not None:
            save_checkpoint(out_dir / f"ckpt_{step:08d}.ppc", params, adam, step, cfg)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    checkpoint(0)
    try:
        for step in range(1, config.total_steps + 1):
            tp = as_tensors(params, dtype)
            rng = drop_rng if config.p_drop > 0 else None
            if config.objective == "cpl" and step > config.bc_warmup_steps:
                idx = batch_rng.integers(0, n_items, size=config.batch_size)
                sa, aa, sb, ab, y = (a[idx] for a in arrays)
                loss = cpl_batch_loss(tp, sa, aa, sb, ab, y, config, rng)
            elif config.objective == "cpl":
                idx = batch_rng.integers(0, len(warm[0]), size=config.bc_batch_size)
                loss = bc_loss(tp, warm[0][idx], warm[1][idx], config.p_drop, rng, config.mean_scale)
            else:
                idx = batch_rng.integers(0, n_items, size=config.bc_batch_size)
                loss = bc_loss(tp, arrays[0][idx], arrays[1][idx], config.p_drop, rng, config.mean_scale)
            grads = backward(loss, tp)
            grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
            if not np.isfinite(grad_norm):
                raise TrainingError(f"non-finite gradient at step {step}")
            adam_step(params.arrays(), grads, adam)
            params.clamp()
            if step % config.log_every == 0:
                wall_ms = int((time.perf_counter() - t0) * 1000)
                result.log_rows.append((step, float(loss.data), grad_norm, wall_ms))
            if step % config.checkpoint_every == 0:
                checkpoint(step)
    except TrainingError:
        log.error("training diverged; last good checkpoint is step %d", result.checkpoints[-1][0])
        raise
    finally:
        result.wall_seconds = time.perf_counter() - t0
        if out_dir is not None:
            write_log(out_dir / "train_log.csv", result.log_rows)
    return result


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for step, loss, gnorm, wall in rows:
            writer.writerow([step, repr(loss), repr(gnorm), wall])
