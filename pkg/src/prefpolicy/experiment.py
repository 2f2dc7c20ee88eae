"""End-to-end runs: collect, label, train over seeds, evaluate, and ablation sweeps."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from prefpolicy.data import EpisodeDataset, PreferenceDataset, sample_pairs
from prefpolicy.envs import make_env, scripted_collect
from prefpolicy.errors import ConfigError
from prefpolicy.evaluation import EvalRecord, best_window_stats, evaluate_checkpoints
from prefpolicy.neural import config_hash
from prefpolicy.teachers import TeacherConfig, label_pairs, measure_accuracy
from prefpolicy.training import CplConfig, train

log = logging.getLogger(__name__)

AXES = ("equal_pref", "dropout")


@dataclass
class ExperimentConfig:
    env: str = "point_reach"
    episodes: int = 2500
    failure_rate: float = 0.5
    expert_noise: float = 0.01
    n_pairs: int = 10_000
    segment_length: int = 16
    data_seed: int = 1
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: CplConfig = field(default_factory=CplConfig)
    eval_episodes: int = 200
    eval_seed: int = 12345
    seeds: tuple = (0, 1, 2, 3)
    window: int = 8

    def data_key(self) -> tuple:
        return (self.env, self.episodes, self.failure_rate, self.expert_noise, self.data_seed)

    def label_key(self) -> tuple:
        return self.data_key() + (self.n_pairs, self.segment_length, self.teacher.hash())

    def hash(self) -> str:
        return config_hash(asdict(self))


@lru_cache(maxsize=8)
def _collect_cached(env, episodes, failure_rate, expert_noise, seed) -> EpisodeDataset:
    return scripted_collect(env, episodes, expert_noise, failure_rate, seed)


def build_episodes(cfg: ExperimentConfig) -> EpisodeDataset:
    return _collect_cached(*cfg.data_key())


_label_cache: dict = {}


def build_preferences(cfg: ExperimentConfig, episodes: EpisodeDataset | None = None) -> PreferenceDataset:
    """Oracle / noisy-oracle labels for ``cfg`` (memoised per process)."""
    key = cfg.label_key()
    if key not in _label_cache:
        episodes = episodes or build_episodes(cfg)
        pairs = sample_pairs(episodes, cfg.n_pairs, cfg.segment_length, cfg.data_seed)
        _label_cache[key] = label_pairs(pairs, cfg.teacher, episodes)
    return _label_cache[key]


def run_seed(cfg: ExperimentConfig, seed: int, data=None) -> tuple[list[int], list[float], float]:
    """Train one seed and evaluate every checkpoint; returns (steps, success rates, wall seconds)."""
    spec = make_env(cfg.env).spec
    tcfg = replace(cfg.train, seed=seed)
    if data is None:
        data = build_preferences(cfg) if tcfg.objective == "cpl" else build_episodes(cfg)
    result = train(data, tcfg, spec.state_dim, spec.action_dim)
    rates = evaluate_checkpoints(result.checkpoints, cfg.env, cfg.eval_episodes, cfg.eval_seed)
    return [s for s, _ in result.checkpoints], rates, result.wall_seconds


def run_seeds(cfg: ExperimentConfig, data=None, workers: int = 1) -> EvalRecord:
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        outs = [run_seed(cfg, s, data) for s in cfg.seeds]
    steps = outs[0][0]
    return EvalRecord(cfg.env, cfg.eval_episodes, steps, [o[1] for o in outs], list(cfg.seeds))


@dataclass
class Cell:
    value: object
    metric: float = float("nan")
    std: float = float("nan")
    per_seed: list = field(default_factory=list)
    record: EvalRecord | None = None
    status: str = "ok"


@dataclass
class AblationReport:
    axis: str
    env: str
    cells: list[Cell]
    accuracy: float | None
    equal_fraction: float
    wall_seconds: float = 0.0

    def cell(self, value) -> Cell:
        for c in self.cells:
            if c.value == value:
                return c
        raise KeyError(value)


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "equal_pref":
        return replace(cfg, train=replace(cfg.train, include_equal=bool(value)))
    if axis == "dropout":
        return replace(cfg, train=replace(cfg.train, p_drop=float(value)))
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def run_ablation(axis: str, values, base: ExperimentConfig, workers: int = 1) -> AblationReport:
    """One training run per (value, seed); each cell reports the windowed metric and its seed spread.

    A failing cell is kept in the report with ``status`` describing the error.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if len(base.seeds) < 2:
        raise ConfigError("an ablation needs at least two seeds per cell")
    t0 = time.perf_counter()
    prefs = build_preferences(base)
    stats = measure_accuracy(prefs, base.teacher.epsilon)
    cells = []
    for value in values:
        cfg = apply_axis(base, axis, value)
        cell = Cell(value)
        try:
            rec = run_seeds(cfg, prefs if workers == 1 else None, workers)
            cell.metric, cell.std, start = best_window_stats(rec.success, cfg.window)
            cell.per_seed = rec.success[:, start : start + cfg.window].mean(axis=1).tolist()
            cell.record = rec
        except Exception as exc:  # keep the partial report
            log.exception("ablation cell %s=%r failed", axis, value)
            cell.status = f"failed: {exc}"
        cells.append(cell)
    return AblationReport(
        axis, base.env, cells, stats["accuracy"], stats["equal_fraction"], time.perf_counter() - t0
    )
