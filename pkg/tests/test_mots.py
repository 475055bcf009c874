import itertools

import numpy as np
import pytest

from conftest import dense_video
from motsmos.errors import ConfigError
from motsmos.mots import extract_frame, extract_sequence, neighbor_offsets, read_cache, write_cache
from motsmos.voxelgrid import GridConfig, SparseFrameState, voxelize


def dense_gather(video, t, r, w):
    """Oracle: for every voxel occupied at t, slice its neighborhood over the last w frames."""
    T, X, Y, Z = video.shape
    pad = np.zeros((T + w, X + 2 * r, Y + 2 * r, Z + 2 * r), dtype=np.uint8)
    pad[w:, r : r + X, r : r + Y, r : r + Z] = video
    feats = {}
    for x, y, z in np.argwhere(video[t]):
        block = pad[t + 1 : t + w + 1, x : x + 2 * r + 1, y : y + 2 * r + 1, z : z + 2 * r + 1]
        # (w, dx, dy, dz) -> (C, w) with lexicographic (dx, dy, dz)
        feats[(int(x), int(y), int(z))] = block.reshape(w, -1).T
    return feats


def test_offsets_sizes():
    assert neighbor_offsets(0).tolist() == [[0, 0, 0]]
    assert len(neighbor_offsets(1)) == 27
    assert len(neighbor_offsets(2)) == 125
    with pytest.raises(ConfigError):
        neighbor_offsets(-1)


def test_offsets_match_loop():
    r = 3
    expected = [(dx, dy, dz) for dx in range(-r, r + 1) for dy in range(-r, r + 1) for dz in range(-r, r + 1)]
    got = [tuple(o) for o in neighbor_offsets(r).tolist()]
    assert got == expected
    assert len(got) == 343 == len(set(got))
    assert got.count((0, 0, 0)) == 1


def test_isolated_voxel():
    w = 8
    state = SparseFrameState(w)
    state.advance([(5, 5, 5)])
    batch = extract_frame(state, neighbor_offsets(1))
    assert batch.features.shape == (1, 27, w)
    feat = batch.features[0]
    assert feat[13].tolist() == [0] * (w - 1) + [1]
    assert feat.sum() == 1


def test_adjacent_pair():
    w = 8
    state = SparseFrameState(w)
    for _ in range(w):
        state.advance([(0, 0, 0), (1, 0, 0)])
    batch = extract_frame(state, neighbor_offsets(1))
    for feat in batch.features:
        full = [c for c in range(27) if feat[c].all()]
        assert len(full) == 2
        assert feat.sum() == 2 * w


@pytest.mark.parametrize("r,w", [(0, 8), (1, 8), (1, 15), (2, 20)])
def test_matches_dense_gather(rng, r, w):
    video = dense_video(rng, (10, 10, 10), 30, density=0.1)
    offsets = neighbor_offsets(r)
    state = SparseFrameState(w)
    for t in range(30):
        state.advance(np.argwhere(video[t]))
        batch = extract_frame(state, offsets)
        oracle = dense_gather(video, t, r, w)
        assert {tuple(c) for c in batch.coords.tolist()} == set(oracle)
        for coord, feat in zip(batch.coords.tolist(), batch.features):
            np.testing.assert_array_equal(feat, oracle[tuple(coord)])
        # self-channel law
        centre = len(offsets) // 2
        assert (batch.features[:, centre, -1] == 1).all()


def test_sequence_padding_and_steady_state():
    cfg = GridConfig(0.2, 8, 1)
    occ = [(0, 0, 0), (0, 0, 1)]
    batches = list(extract_sequence([occ] * 12, cfg))
    first = batches[0].features
    assert (first[:, 13] == [0] * 7 + [1]).all()
    for b in batches[cfg.window - 1 :]:
        for feat in b.features:
            rows = feat[feat.any(axis=1)]
            assert rows.all()


def test_sequence_equals_manual(rng):
    video = dense_video(rng, (8, 8, 8), 20)
    cfg = GridConfig(0.2, 10, 1)
    state = SparseFrameState(cfg.window)
    offsets = neighbor_offsets(cfg.radius)
    for t, batch in enumerate(extract_sequence((np.argwhere(f) for f in video), cfg)):
        state.advance(np.argwhere(video[t]))
        manual = extract_frame(state, offsets)
        np.testing.assert_array_equal(batch.coords, manual.coords)
        np.testing.assert_array_equal(batch.features, manual.features)
        assert batch.frame_index == t


def test_translation_equivariance(rng):
    video = dense_video(rng, (6, 6, 6), 12)
    cfg = GridConfig(0.2, 8, 1)
    shift = np.array([7, -3, 11])
    a = list(extract_sequence((np.argwhere(f) for f in video), cfg))
    b = list(extract_sequence((np.argwhere(f) + shift for f in video), cfg))
    for ba, bb in zip(a, b):
        np.testing.assert_array_equal(ba.coords + shift, bb.coords)
        np.testing.assert_array_equal(ba.features, bb.features)


def test_voxelization_points_shift():
    cfg = GridConfig(0.2, 8, 1)
    frames = [voxelize(np.array([[0.1 + 0.2 * t, 0.1, 0.1]]), cfg.resolution) for t in range(3)]
    batches = list(extract_sequence(frames, cfg))
    assert batches[2].coords.tolist() == [[2, 0, 0]]
    # the voxel behind was occupied one frame earlier: offset (-1,0,0) is row 4
    assert batches[2].features[0, 4].tolist() == [0] * 6 + [1, 0]


def test_cache_roundtrip(tmp_path, rng):
    video = dense_video(rng, (6, 6, 6), 10)
    cfg = GridConfig(0.2, 10, 1)
    batches = list(extract_sequence((np.argwhere(f) for f in video), cfg))
    n = write_cache(tmp_path / "c.mots", batches, 27, 10)
    coords, ts, feats = read_cache(tmp_path / "c.mots")
    assert n == len(coords) == sum(len(b) for b in batches)
    np.testing.assert_array_equal(feats, np.concatenate([b.features for b in batches]))
    np.testing.assert_array_equal(coords, np.concatenate([b.coords for b in batches]))
    np.testing.assert_array_equal(ts, np.concatenate([[b.frame_index] * len(b) for b in batches]))
