"""Trajectories, segments, preference pairs, and their on-disk formats."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from prefpolicy.errors import ConfigError, SegmentBoundsError
from prefpolicy.storage import (
    EPISODE_MAGIC,
    ChecksumError,
    StorageError,
    TruncatedFileError,
    VersionMismatchError,
    read_container,
    write_container,
)

LABELS = (0.0, 0.5, 1.0)
TEACHER_KINDS = ("oracle", "noisy_oracle", "vlm", "vlm_mock")
PREF_FORMAT_VERSION = 1


@dataclass(eq=False)
class Trajectory:
    """One episode. ``true_rewards`` is never handed to a learner."""

    states: np.ndarray  # (H, state_dim) float32
    actions: np.ndarray  # (H, action_dim) float32
    true_rewards: np.ndarray  # (H,) float32
    success: bool
    index: int = 0
    has_frames: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.true_rewards = np.asarray(self.true_rewards, dtype=np.float32)
        self.success = bool(self.success)
        if not (len(self.states) == len(self.actions) == len(self.true_rewards)):
            raise ConfigError(
                f"episode {self.index}: states/actions/rewards lengths differ "
                f"({len(self.states)}, {len(self.actions)}, {len(self.true_rewards)})"
            )

    @property
    def horizon(self) -> int:
        return len(self.states)

    @property
    def frames(self) -> Optional[list[tuple[int, int]]]:
        if not self.has_frames:
            return None
        return [(self.index, t) for t in range(self.horizon)]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.index == other.index
            and self.success == other.success
            and self.has_frames == other.has_frames
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.true_rewards, other.true_rewards)
        )


@dataclass(frozen=True)
class Segment:
    """A contiguous length-``length`` view into one trajectory."""

    source_episode: int
    start: int
    length: int
    traj: Optional[Trajectory] = field(default=None, compare=False, repr=False)

    def _view(self, arr):
        if self.traj is None:
            raise ConfigError(f"segment ({self.source_episode}, {self.start}) is not bound to an episode")
        return arr[self.start : self.start + self.length]

    @property
    def states(self) -> np.ndarray:
        return self._view(self.traj.states if self.traj is not None else None)

    @property
    def actions(self) -> np.ndarray:
        return self._view(self.traj.actions if self.traj is not None else None)

    @property
    def true_rewards(self) -> np.ndarray:
        return self._view(self.traj.true_rewards if self.traj is not None else None)

    @property
    def frames(self) -> Optional[list[tuple[int, int]]]:
        frames = self.traj.frames if self.traj is not None else None
        return None if frames is None else frames[self.start : self.start + self.length]


def slice_segment(traj: Trajectory, start: int, length: int) -> Segment:
    if length < 1 or start < 0 or start + length > traj.horizon:
        raise SegmentBoundsError(
            f"episode {traj.index}: slice [{start}, {start + length}) outside horizon {traj.horizon}"
        )
    return Segment(traj.index, int(start), int(length), traj)


@dataclass(frozen=True)
class PreferencePair:
    seg_a: Segment
    seg_b: Segment
    label: float
    teacher_kind: str
    query_id: int
    raw_response: Optional[str] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ConfigError(f"query {self.query_id}: label {self.label!r} not in {{0, 0.5, 1}}")
        if self.seg_a.length != self.seg_b.length:
            raise ConfigError(f"query {self.query_id}: segment lengths differ")
        if self.teacher_kind not in TEACHER_KINDS:
            raise ConfigError(f"unknown teacher kind {self.teacher_kind!r}")


class EpisodeDataset:
    """Immutable collection of trajectories plus a metadata block."""

    def __init__(self, episodes: list[Trajectory], metadata: dict | None = None):
        self.episodes = list(episodes)
        for i, ep in enumerate(self.episodes):
            if ep.index != i:
                raise ConfigError(f"episode at position {i} carries index {ep.index}")
        self.metadata = dict(metadata or {})
        self.metadata["count"] = len(self.episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def __getitem__(self, i) -> Trajectory:
        return self.episodes[i]

    def __eq__(self, other):
        if not isinstance(other, EpisodeDataset):
            return NotImplemented
        return self.metadata == other.metadata and self.episodes == other.episodes

    @property
    def success_rate(self) -> float:
        return float(np.mean([ep.success for ep in self.episodes])) if self.episodes else 0.0

    def transitions(self) -> tuple[np.ndarray, np.ndarray]:
        """All (state, action) rows stacked, for behavior cloning."""
        return (
            np.concatenate([ep.states for ep in self.episodes]),
            np.concatenate([ep.actions for ep in self.episodes]),
        )


def sample_pairs(dataset: EpisodeDataset, n: int, length: int, rng_seed: int) -> list[tuple[Segment, Segment]]:
    """Draw ``n`` segment pairs uniformly over all valid (episode, start) slices.

    The two slices of a pair are never the same (episode, start).
    """
    if n <= 0:
        raise ConfigError(f"number of pairs must be positive, got {n}")
    if length < 1:
        raise ConfigError(f"segment length must be >= 1, got {length}")
    if len(dataset) == 0:
        raise ConfigError("episode dataset is empty")
    counts = np.array([max(ep.horizon - length + 1, 0) for ep in dataset.episodes], dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ConfigError(f"no episode is long enough for segments of length {length}")
    if total < 2:
        raise ConfigError("only one valid slice exists; cannot form a pair of distinct segments")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    rng = np.random.default_rng(rng_seed)
    a = rng.integers(0, total, size=n)
    b = rng.integers(0, total, size=n)
    clash = a == b
    while clash.any():
        b[clash] = rng.integers(0, total, size=int(clash.sum()))
        clash = a == b

    def locate(flat):
        ep = np.searchsorted(offsets, flat, side="right") - 1
        return ep, flat - offsets[ep]

    ep_a, st_a = locate(a)
    ep_b, st_b = locate(b)
    eps = dataset.episodes
    return [
        (
            slice_segment(eps[int(ea)], int(sa), length),
            slice_segment(eps[int(eb)], int(sb), length),
        )
        for ea, sa, eb, sb in zip(ep_a, st_a, ep_b, st_b)
    ]


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metadata = dict(self.metadata)
        self.metadata["N"] = len(self.pairs)
        lengths = {p.seg_a.length for p in self.pairs}
        if len(lengths) > 1:
            raise ConfigError(f"mixed segment lengths {sorted(lengths)} in one preference dataset")
        if lengths:
            L = lengths.pop()
            if self.metadata.setdefault("L", L) != L:
                raise ConfigError(f"metadata L={self.metadata['L']} but segments have length {L}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs], dtype=np.float64)


# -- episode file ---------------------------------------------------------------


def save_episodes(dataset: EpisodeDataset, path) -> None:
    eps = dataset.episodes
    state_dim = eps[0].states.shape[1] if eps else 0
    action_dim = eps[0].actions.shape[1] if eps else 0
    arrays = []
    for ep in eps:
        arrays += [ep.states.ravel(), ep.actions.ravel(), ep.true_rewards, np.array([float(ep.success)])]
    horizons = [ep.horizon for ep in eps]
    header = {
        "kind": "episodes",
        "metadata": dataset.metadata,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "horizons": horizons,
        "has_frames": [ep.has_frames for ep in eps],
        "payload_count": int(sum(h * (state_dim + action_dim + 1) + 1 for h in horizons)),
    }
    write_container(path, EPISODE_MAGIC, header, arrays, dtype="<f4")


def load_episodes(path) -> EpisodeDataset:
    header, flat = read_container(path, EPISODE_MAGIC)
    sd, ad = header["state_dim"], header["action_dim"]
    episodes, pos = [], 0
    for i, (h, frames) in enumerate(zip(header["horizons"], header["has_frames"])):
        states = flat[pos : pos + h * sd].reshape(h, sd)
        pos += h * sd
        actions = flat[pos : pos + h * ad].reshape(h, ad)
        pos += h * ad
        rewards = flat[pos : pos + h]
        pos += h
        success = bool(flat[pos])
        pos += 1
        episodes.append(Trajectory(states, actions, rewards, success, index=i, has_frames=frames))
    return EpisodeDataset(episodes, header["metadata"])


# -- preference file ------------------------------------------------------------


def _fmt_label(y: float) -> str:
    return {0.0: "0", 0.5: "0.5", 1.0: "1"}[y]


def dumps_preferences(dataset: PreferenceDataset) -> bytes:
    meta = json.dumps(dataset.metadata, sort_keys=True, separators=(",", ":"))
    lines = [f"#PPREF\t{PREF_FORMAT_VERSION}\t{meta}"]
    for p in dataset.pairs:
        raw = "" if p.raw_response is None else json.dumps(p.raw_response)
        lines.append(
            "\t".join(
                [
                    str(p.query_id),
                    str(p.seg_a.source_episode),
                    str(p.seg_a.start),
                    str(p.seg_b.source_episode),
                    str(p.seg_b.start),
                    _fmt_label(p.label),
                    p.teacher_kind,
                    raw,
                ]
            )
        )
    body = ("\n".join(lines) + "\n").encode("utf-8")
    return body + f"#crc32\t{zlib.crc32(body) & 0xFFFFFFFF:08x}\n".encode("ascii")


def save_preferences(dataset: PreferenceDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_preferences(dataset))


def load_preferences(path, episodes: EpisodeDataset | None = None) -> PreferenceDataset:
    """Read a preference file; pass ``episodes`` to bind segments to their trajectories."""
    raw = Path(path).read_bytes()
    cut = raw.rfind(b"#crc32\t")
    if cut < 0 or not raw.endswith(b"\n"):
        raise TruncatedFileError(f"{path}: missing checksum trailer")
    body, trailer = raw[:cut], raw[cut:]
    try:
        stored = int(trailer.decode("ascii").split("\t")[1], 16)
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise TruncatedFileError(f"{path}: malformed checksum trailer") from exc
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    lines = body.decode("utf-8").split("\n")[:-1]
    tag, version, meta = lines[0].split("\t", 2)
    if tag != "#PPREF":
        raise StorageError(f"{path}: not a preference file")
    if int(version) != PREF_FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: preference format version {version}, reader supports {PREF_FORMAT_VERSION}")
    metadata = json.loads(meta)
    L = int(metadata["L"]) if "L" in metadata else None
    pairs = []
    for line in lines[1:]:
        qid, ea, sa, eb, sb, label, kind, rawtxt = line.split("\t")
        ea, sa, eb, sb = int(ea), int(sa), int(eb), int(sb)
        if episodes is not None:
            seg_a = slice_segment(episodes[ea], sa, L)
            seg_b = slice_segment(episodes[eb], sb, L)
        else:
            seg_a, seg_b = Segment(ea, sa, L), Segment(eb, sb, L)
        pairs.append(
            PreferencePair(
                seg_a, seg_b, float(label), kind, int(qid), json.loads(rawtxt) if rawtxt else None
            )
        )
    return PreferenceDataset(pairs, metadata)


class FrameStore:
    """Side-car frame cache keyed by (episode, t); frames are rendered on demand."""

    def __init__(self, dataset: EpisodeDataset, render: Callable[[np.ndarray], np.ndarray], maxsize: int = 4096):
        self.dataset = dataset
        self._render = render
        self._get = lru_cache(maxsize=maxsize)(self._load)

    def _load(self, handle: tuple[int, int]) -> np.ndarray:
        ep, t = handle
        traj = self.dataset[ep]
        if not traj.has_frames:
            raise KeyError(f"episode {ep} was collected without frames")
        return self._render(traj.states[t])

    def __getitem__(self, handle: tuple[int, int]) -> np.ndarray:
        return self._get(tuple(handle))
