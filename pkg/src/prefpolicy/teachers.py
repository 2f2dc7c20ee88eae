"""Preference teachers: ground-truth oracle, label-flipping noisy oracle, and VLM."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from prefpolicy.data import EpisodeDataset, PreferenceDataset, PreferencePair, Segment
from prefpolicy.errors import ConfigError, MetricError, TeacherError
from prefpolicy.neural import config_hash

log = logging.getLogger(__name__)

# Equal-label band on undiscounted segment-return differences, per env, for L=16.
# Chosen so the oracle marks roughly a fifth of random pairs as equal.
DEFAULT_EPSILON = {"point_reach": 0.1, "drawer_pull": 0.02}


@dataclass
class TeacherConfig:
    kind: str = "oracle"
    epsilon: float = 0.5
    p_flip: float = 0.0
    seed: int = 0
    task_description: str = ""
    endpoint: str = "http://127.0.0.1:8080/v1/chat"
    model: str = "gemini-1.5-pro"
    timeout: float = 30.0
    max_retries: int = 3
    max_concurrency: int = 4
    stage1_template: str = "stage1"
    stage2_template: str = "stage2"

    def __post_init__(self):
        if self.kind not in ("oracle", "noisy_oracle", "vlm", "vlm_mock"):
            raise ConfigError(f"unknown teacher kind {self.kind!r}")
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.p_flip <= 0.5:
            raise ConfigError(f"flip probability must lie in [0, 0.5], got {self.p_flip}")
        if self.max_retries < 1 or self.max_concurrency < 1:
            raise ConfigError("max_retries and max_concurrency must be >= 1")

    def hash(self) -> str:
        return config_hash(asdict(self))


def _segment_return(seg: Segment) -> float:
    try:
        rewards = seg.true_rewards
    except ConfigError as exc:
        raise TeacherError(f"segment ({seg.source_episode}, {seg.start}) carries no true rewards") from exc
    return float(np.sum(rewards, dtype=np.float64))


def oracle_rule(return_a: float, return_b: float, epsilon: float) -> float:
    if return_a > return_b + epsilon:
        return 0.0
    if return_b > return_a + epsilon:
        return 1.0
    return 0.5


def oracle_label(seg_a: Segment, seg_b: Segment, epsilon: float) -> float:
    return oracle_rule(_segment_return(seg_a), _segment_return(seg_b), epsilon)


def noisy_label(seg_a: Segment, seg_b: Segment, epsilon: float, p_flip: float, rng: np.random.Generator) -> float:
    """Oracle label with decisive labels flipped at rate ``p_flip``.

    Exactly one uniform draw per call, so the RNG transcript does not depend on the label.
    """
    y = oracle_label(seg_a, seg_b, epsilon)
    u = rng.random()
    if y != 0.5 and u < p_flip:
        return 1.0 - y
    return y


def select_frames(seg: Segment) -> tuple:
    """First, middle and last frame handles of a segment."""
    frames = seg.frames
    if frames is None:
        raise TeacherError(
            f"episode {seg.source_episode} has no frames; re-collect the dataset with rendering enabled"
        )
    L = seg.length
    return tuple(frames[i] for i in frame_indices(L))


def frame_indices(L: int) -> tuple[int, int, int]:
    if L < 1:
        raise ConfigError(f"segment length must be >= 1, got {L}")
    return (0, L // 2, L - 1)


def measure_accuracy(dataset: PreferenceDataset, epsilon: float) -> dict:
    """Agreement with the oracle on pairs the oracle finds decisive, plus the equal-label share.

    ``accuracy`` is ``None`` when the oracle calls every pair equal.
    """
    if len(dataset) == 0:
        raise MetricError("cannot measure accuracy of an empty preference dataset")
    labels = dataset.labels
    truth = np.array([oracle_label(p.seg_a, p.seg_b, epsilon) for p in dataset.pairs])
    decisive = truth != 0.5
    n = int(decisive.sum())
    return {
        "accuracy": float(np.mean(labels[decisive] == truth[decisive])) if n else None,
        "equal_fraction": float(np.mean(labels == 0.5)),
        "n_decisive": n,
        "n_pairs": len(dataset),
    }


def label_pairs(
    pairs: list[tuple[Segment, Segment]],
    config: TeacherConfig,
    episodes: EpisodeDataset | None = None,
    frame_store=None,
    client=None,
) -> PreferenceDataset:
    """Label sampled segment pairs with the configured teacher.

    VLM teachers need a ``frame_store`` and either a ``client`` or the endpoint in
    ``config``; records the VLM fails to label are dropped.
    """
    records: list[PreferencePair] = []
    if config.kind in ("oracle", "noisy_oracle"):
        rng = np.random.default_rng(config.seed)
        for qid, (a, b) in enumerate(pairs):
            if config.kind == "oracle":
                y = oracle_label(a, b, config.epsilon)
            else:
                y = noisy_label(a, b, config.epsilon, config.p_flip, rng)
            records.append(PreferencePair(a, b, y, config.kind, qid))
        invalid = 0
    else:
        from prefpolicy.vlm import VlmClient, label_with_vlm

        if frame_store is None:
            raise TeacherError("VLM teachers need a frame store to render segment frames")
        client = client or VlmClient.from_config(config)
        records, invalid = label_with_vlm(pairs, config, frame_store, client)
    meta = {
        "teacher_config_hash": config.hash(),
        "teacher_kind": config.kind,
        "queries": len(pairs),
        "invalid": invalid,
        "seed": config.seed,
    }
    if episodes is not None:
        meta["env"] = episodes.metadata.get("env")
    if pairs:
        meta["L"] = pairs[0][0].length
    return PreferenceDataset(records, meta)


def calibrate_epsilon(pairs, target_equal: float) -> float:
    """Smallest threshold whose oracle equal-label share reaches ``target_equal``."""
    diffs = np.sort([abs(_segment_return(a) - _segment_return(b)) for a, b in pairs])
    k = min(int(math.ceil(target_equal * len(diffs))), len(diffs)) - 1
    return float(diffs[max(k, 0)])
