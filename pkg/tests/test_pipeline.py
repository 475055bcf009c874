import numpy as np
import pytest

from motsmos import pipeline as pl
from motsmos.config import load_config
from motsmos.errors import ConfigError, DataError
from motsmos.synthetic import preset, write_scene

SMALL = {
    "data.moving_labels": "1",
    "grid.w": "8",
    "grid.r": "1",
    "model.e": "4",
    "model.fc_hidden": "16",
    "train.batch": "128",
    "train.lr": "1e-3",
    "train.epochs": "1",
    "train.max_samples": "1500",
    "gmm.k": "4",
    "gmm.sample_target": "3000",
    "gmm.first_n_frames": "3",
}


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    write_scene(preset("passing-car", seed=3, frames=12), out)
    return out


def small_cfg(scene, **extra):
    return load_config(None, {**SMALL, "data.frames": str(scene), **extra})


def test_load_sequence_lifts_labels(scene):
    frames = pl.load_sequence(small_cfg(scene))
    assert len(frames) == 12
    for fd in frames:
        assert fd.truth is not None and len(fd.truth) == len(fd.voxels)
        assert fd.file_mask.all()
    assert sum(int(fd.truth.sum()) for fd in frames) > 0


def test_collect_training_features(scene):
    cfg = small_cfg(scene)
    frames = pl.load_sequence(cfg)
    data = pl.collect_training_features(frames, cfg)
    assert data.shape[1:] == (27, 8) and 0 < len(data) <= 1500
    assert data.dtype == np.uint8


def test_run_end_to_end(scene):
    cfg = small_cfg(scene)
    frames = pl.load_sequence(cfg)
    res = pl.run(frames, cfg)
    assert len(res.predictions) == len(frames)
    for fd, pred in zip(frames, res.predictions):
        np.testing.assert_array_equal(np.sort(pred.coords, axis=0), np.sort(fd.voxels.coords, axis=0))
    assert [f.frame_index for f in res.evaluation.frames] == list(range(7, 12))
    assert 0.0 <= res.evaluation.miou <= 1.0
    # the CSV route scores the same predictions identically
    path = scene / "pred.csv"
    path.write_text(pl.predictions_csv(res.predictions))
    again = pl.evaluate_prediction_table(frames, pl.read_predictions_csv(path), cfg)
    assert again.miou == res.evaluation.miou


def test_truth_as_predictions_scores_one(scene):
    cfg = small_cfg(scene)
    frames = pl.load_sequence(cfg)
    preds = [pl.FramePrediction(fd.index, fd.voxels.coords, fd.truth) for fd in frames]
    assert pl.evaluate(frames, preds, cfg).miou == 1.0


def test_point_predictions_cover_file_records(tmp_path):
    pts = np.array([[0.1, 0.1, 0.1], [np.nan, 0, 0], [0.15, 0.1, 0.1], [0, 0, -5.0], [3.0, 3.0, 3.0]])
    np.hstack([pts, np.zeros((5, 1))]).astype("<f4").tofile(tmp_path / "000000.bin")
    cfg = load_config(None, {"data.frames": str(tmp_path)})
    (fd,) = pl.load_sequence(cfg)
    assert fd.file_mask.tolist() == [True, False, True, True, True]
    voxel_of = {tuple(c): i for i, c in enumerate(fd.voxels.coords.tolist())}
    moving = np.zeros(len(fd.voxels), bool)
    moving[voxel_of[(0, 0, 0)]] = True
    flags = pl.point_predictions(fd, pl.FramePrediction(0, fd.voxels.coords, moving))
    assert flags.tolist() == [True, False, True, False, False]


def test_errors(tmp_path, scene):
    with pytest.raises(DataError):
        pl.load_sequence(small_cfg(tmp_path))
    with pytest.raises(DataError):
        pl.load_sequence(small_cfg(tmp_path / "absent"))
    cfg = small_cfg(scene, **{"gmm.reference_frame": "40"})
    frames = pl.load_sequence(cfg)
    with pytest.raises(ConfigError):
        pl.run(frames[:5], cfg)
