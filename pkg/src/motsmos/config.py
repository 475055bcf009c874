"""Pipeline configuration: ``section.key = value`` files plus ``--section.key value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from motsmos.errors import ConfigError
from motsmos.ingest import DEFAULT_MOVING_LABELS


@dataclass
class DataConfig:
    frames: str = ""
    poses: str = ""
    labels: str = ""
    output: str = "out"
    moving_labels: tuple[int, ...] = tuple(sorted(DEFAULT_MOVING_LABELS))


@dataclass
class GridSection:
    m: float = 0.2
    w: int = 15
    r: int = 2


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = ()
    fc_hidden: int = 64
    e: int = 32
    seed: int = 0
    literal_relu: bool = False


@dataclass
class TrainSection:
    batch: int = 1024
    lr: float = 1e-4
    epochs: int = 2
    max_samples: int = 100_000
    log_every: int = 10


@dataclass
class GmmSection:
    k: int = 20
    sample_target: int = 200_000
    first_n_frames: int = 10
    threshold: float = 0.15
    max_iter: int = 100
    tol: float = 1e-4
    var_floor: float = 1e-6
    reference_frame: int = -1


@dataclass
class EvalSection:
    ground_z: float = -1.0
    lift_rule: str = "any"
    warmup: int = -1


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridSection = field(default_factory=GridSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    gmm: GmmSection = field(default_factory=GmmSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.model.seed

    @property
    def warmup(self) -> int:
        """First frame whose histories are complete (unless overridden)."""
        return self.eval.warmup if self.eval.warmup >= 0 else self.grid.w - 1

    @property
    def reference_frame(self) -> int:
        return self.gmm.reference_frame if self.gmm.reference_frame >= 0 else self.warmup

    def validate(self) -> "PipelineConfig":
        g = self.grid
        if not g.m > 0:
            raise ConfigError(f"grid.m must be positive, got {g.m}")
        if not 7 <= g.w <= 63:
            raise ConfigError(f"grid.w must lie in [7, 63], got {g.w}")
        if g.r < 0:
            raise ConfigError(f"grid.r must be >= 0, got {g.r}")
        if self.model.channels and (len(self.model.channels) != 3 or min(self.model.channels) < 1):
            raise ConfigError(f"model.channels must be three positive ints, got {self.model.channels}")
        if self.model.e < 1 or self.model.fc_hidden < 1:
            raise ConfigError("model.e and model.fc_hidden must be positive")
        if self.train.batch < 1 or self.train.epochs < 1 or not self.train.lr > 0:
            raise ConfigError("train.batch, train.epochs and train.lr must be positive")
        if self.gmm.k < 1:
            raise ConfigError(f"gmm.k must be >= 1, got {self.gmm.k}")
        if not 0 < self.gmm.threshold <= 1:
            raise ConfigError(f"gmm.threshold must lie in (0, 1], got {self.gmm.threshold}")
        if self.gmm.first_n_frames < 1 or self.gmm.sample_target < 1:
            raise ConfigError("gmm.first_n_frames and gmm.sample_target must be positive")
        if self.eval.lift_rule not in ("any", "majority"):
            raise ConfigError(f"eval.lift_rule must be 'any' or 'majority', got {self.eval.lift_rule!r}")
        return self

    def copy(self) -> "PipelineConfig":
        return dataclasses.replace(
            self, **{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)}
        )

    def items(self):
        for sec in fields(self):
            section = getattr(self, sec.name)
            for f in fields(section):
                yield f"{sec.name}.{f.name}", getattr(section, f.name), f

    def set(self, key: str, value: Any) -> None:
        section_name, _, name = key.partition(".")
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section in {key!r}")
        match = {f.name: f for f in fields(section)}.get(name)
        if match is None:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, name, _coerce(key, value, getattr(section, name)))

    def dumps(self) -> str:
        lines = []
        for key, value, _ in self.items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, value: Any, current: Any) -> Any:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return text


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    """``section.key = value`` pairs; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        for key, value in parse_lines(p.read_text(), str(p)):
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg.validate()
