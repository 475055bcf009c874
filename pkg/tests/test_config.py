import pytest

from motsmos.config import PipelineConfig, load_config, parse_lines
from motsmos.errors import ConfigError


def test_defaults():
    cfg = PipelineConfig().validate()
    assert (cfg.grid.m, cfg.grid.w, cfg.grid.r) == (0.2, 15, 2)
    assert cfg.model.e == 32 and cfg.gmm.k == 20 and cfg.gmm.threshold == 0.15
    assert cfg.warmup == 14 and cfg.reference_frame == 14
    assert set(cfg.data.moving_labels) == set(range(251, 260))


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ngrid.r = 1\ngrid.w = 8  # trailing\ndata.moving_labels = 1, 2\nmodel.literal_relu = yes\n")
    cfg = load_config(str(path), {"grid.r": "0", "gmm.reference_frame": "9"})
    assert cfg.grid.r == 0 and cfg.grid.w == 8
    assert cfg.data.moving_labels == (1, 2)
    assert cfg.model.literal_relu is True
    assert cfg.warmup == 7 and cfg.reference_frame == 9


def test_dumps_roundtrip(tmp_path):
    cfg = load_config(None, {"grid.m": "0.1", "model.channels": "8,4,4", "eval.lift_rule": "majority"})
    path = tmp_path / "dump.cfg"
    path.write_text(cfg.dumps())
    assert load_config(str(path)) == cfg


def test_copy_is_deep():
    a = PipelineConfig()
    b = a.copy()
    b.grid.r = 0
    assert a.grid.r == 2


@pytest.mark.parametrize(
    "key,value",
    [
        ("grid.w", "6"),
        ("grid.w", "64"),
        ("grid.m", "0"),
        ("grid.r", "-1"),
        ("gmm.k", "0"),
        ("gmm.threshold", "1.5"),
        ("model.channels", "8,4"),
        ("eval.lift_rule", "vote"),
        ("grid.r", "two"),
        ("model.literal_relu", "maybe"),
        ("grid.q", "1"),
        ("nosuch.key", "1"),
    ],
)
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        load_config(None, {key: value})


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_lines("grid.r 2")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.cfg"))
