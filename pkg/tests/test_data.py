import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_dataset
from prefpolicy.data import (
    EpisodeDataset,
    PreferenceDataset,
    PreferencePair,
    Segment,
    Trajectory,
    dumps_preferences,
    load_episodes,
    load_preferences,
    sample_pairs,
    save_episodes,
    save_preferences,
    slice_segment,
)
from prefpolicy.errors import ConfigError, SegmentBoundsError
from prefpolicy.storage import (
    BadMagicError,
    ChecksumError,
    StorageError,
    TruncatedFileError,
    VersionMismatchError,
)
from prefpolicy.teachers import TeacherConfig, label_pairs


def _traj(h=100, index=0):
    rng = np.random.default_rng(index)
    return Trajectory(rng.normal(size=(h, 4)), rng.normal(size=(h, 2)), rng.normal(size=h), False, index=index)


def test_slice_prefix_and_suffix():
    t = _traj()
    seg = slice_segment(t, 0, 16)
    assert np.array_equal(seg.states, t.states[0:16])
    seg = slice_segment(t, 84, 16)
    assert np.array_equal(seg.actions, t.actions[84:100])
    assert seg.states.shape == (16, 4)


def test_slice_out_of_bounds_names_episode():
    with pytest.raises(SegmentBoundsError, match="episode 7"):
        slice_segment(_traj(index=7), 90, 16)
    with pytest.raises(SegmentBoundsError):
        slice_segment(_traj(), -1, 4)


def test_unbound_segment_raises():
    with pytest.raises(ConfigError):
        Segment(0, 0, 4).states


def test_segment_frames_follow_slice():
    t = Trajectory(np.zeros((10, 4)), np.zeros((10, 2)), np.zeros(10), False, index=3, has_frames=True)
    assert slice_segment(t, 2, 3).frames == [(3, 2), (3, 3), (3, 4)]
    t.has_frames = False
    assert slice_segment(t, 2, 3).frames is None


def test_sample_pairs_count_and_determinism(small_reach):
    a = sample_pairs(small_reach, 500, 16, 9)
    b = sample_pairs(small_reach, 500, 16, 9)
    assert len(a) == 500
    assert a == b
    assert a != sample_pairs(small_reach, 500, 16, 10)
    assert all((x.source_episode, x.start) != (y.source_episode, y.start) for x, y in a)


def test_sample_pairs_single_slice_is_an_error():
    ds = EpisodeDataset([_traj(h=16)])
    with pytest.raises(ConfigError):
        sample_pairs(ds, 1, 16, 0)


def test_sample_pairs_rejects_bad_arguments(small_reach):
    with pytest.raises(ConfigError):
        sample_pairs(small_reach, 0, 16, 0)
    with pytest.raises(ConfigError):
        sample_pairs(small_reach, 5, 101, 0)


def test_sample_pairs_covers_all_starts():
    ds = EpisodeDataset([_traj(h=20, index=0), _traj(h=20, index=1)])
    pairs = sample_pairs(ds, 4000, 16, 0)
    starts = {(s.source_episode, s.start) for pair in pairs for s in pair}
    assert starts == {(e, s) for e in range(2) for s in range(5)}


@given(
    seed=st.integers(0, 2**31 - 1),
    horizons=st.lists(st.integers(1, 30), min_size=1, max_size=6),
    length=st.integers(1, 12),
    n=st.integers(1, 50),
)
def test_sampled_segments_satisfy_slice_invariants(seed, horizons, length, n):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, len(horizons), horizons)
    valid = sum(max(h - length + 1, 0) for h in horizons)
    if valid < 2:
        with pytest.raises(ConfigError):
            sample_pairs(ds, n, length, seed)
        return
    pairs = sample_pairs(ds, n, length, seed)
    assert pairs == sample_pairs(ds, n, length, seed)
    for a, b in pairs:
        for s in (a, b):
            assert s.length == length
            assert 0 <= s.start and s.start + length <= horizons[s.source_episode]
            assert np.array_equal(s.states, ds[s.source_episode].states[s.start : s.start + length])
        assert (a.source_episode, a.start) != (b.source_episode, b.start)


def test_pair_validation():
    t = _traj()
    a, b = slice_segment(t, 0, 4), slice_segment(t, 5, 4)
    with pytest.raises(ConfigError):
        PreferencePair(a, b, 0.3, "oracle", 0)
    with pytest.raises(ConfigError):
        PreferencePair(a, slice_segment(t, 5, 5), 0.0, "oracle", 0)
    with pytest.raises(ConfigError):
        PreferencePair(a, b, 0.0, "human", 0)


# -- persistence ---------------------------------------------------------------------


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(0, 6), frames=st.booleans())
def test_episode_roundtrip(tmp_path_factory, seed, n, frames):
    rng = np.random.default_rng(seed)
    horizons = rng.integers(1, 30, size=n)
    ds = random_dataset(rng, n, horizons, frames=frames)
    path = tmp_path_factory.mktemp("ep") / "d.ppd"
    save_episodes(ds, path)
    assert load_episodes(path) == ds


def _prefs(ds, n=50, seed=0):
    return label_pairs(sample_pairs(ds, n, 8, seed), TeacherConfig(epsilon=0.5), ds)


def test_preference_roundtrip_with_raw_responses(tmp_path, rng):
    ds = random_dataset(rng)
    prefs = _prefs(ds)
    odd = PreferencePair(prefs.pairs[0].seg_a, prefs.pairs[0].seg_b, 1.0, "vlm", 99, 'line1\n\t"quoted"\\')
    prefs = PreferenceDataset(prefs.pairs + [odd], prefs.metadata)
    path = tmp_path / "p.tsv"
    save_preferences(prefs, path)
    back = load_preferences(path, ds)
    assert back.pairs == prefs.pairs
    assert back.metadata == prefs.metadata
    assert back.pairs[-1].raw_response == odd.raw_response
    assert np.array_equal(back.pairs[3].seg_a.states, prefs.pairs[3].seg_a.states)


def test_preference_roundtrip_empty(tmp_path):
    empty = PreferenceDataset([], {"teacher_kind": "oracle"})
    save_preferences(empty, tmp_path / "e.tsv")
    back = load_preferences(tmp_path / "e.tsv")
    assert back.pairs == [] and back.metadata == empty.metadata


def test_preference_roundtrip_10k(tmp_path, small_reach):
    prefs = label_pairs(sample_pairs(small_reach, 10_000, 16, 0), TeacherConfig(epsilon=0.1), small_reach)
    save_preferences(prefs, tmp_path / "big.tsv")
    back = load_preferences(tmp_path / "big.tsv", small_reach)
    assert len(back) == 10_000
    assert back.pairs == prefs.pairs
    assert np.array_equal(back.labels, prefs.labels)


def test_preference_file_errors(tmp_path, rng):
    raw = dumps_preferences(_prefs(random_dataset(rng)))
    bad = tmp_path / "bad.tsv"
    bad.write_bytes(raw.replace(b"oracle", b"oraclf", 1))
    with pytest.raises(ChecksumError):
        load_preferences(bad)
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        load_preferences(bad)
    bumped = raw.split(b"#crc32")[0].replace(b"#PPREF\t1\t", b"#PPREF\t2\t", 1)
    import zlib

    bad.write_bytes(bumped + f"#crc32\t{zlib.crc32(bumped) & 0xFFFFFFFF:08x}\n".encode())
    with pytest.raises(VersionMismatchError):
        load_preferences(bad)


def test_episode_file_errors(tmp_path, rng):
    path = tmp_path / "d.ppd"
    save_episodes(random_dataset(rng), path)
    raw = path.read_bytes()

    def write(data):
        path.write_bytes(data)
        return path

    with pytest.raises(ChecksumError):
        load_episodes(write(raw[:-10] + bytes([raw[-10] ^ 1]) + raw[-9:]))
    with pytest.raises(TruncatedFileError):
        load_episodes(write(raw[:-100]))
    with pytest.raises(TruncatedFileError):
        load_episodes(write(raw[:10]))
    with pytest.raises(BadMagicError):
        load_episodes(write(b"XXXX" + raw[4:]))
    with pytest.raises(VersionMismatchError):
        load_episodes(write(raw[:4] + (9).to_bytes(4, "little") + raw[8:]))
    assert issubclass(ChecksumError, StorageError)
