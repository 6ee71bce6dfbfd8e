"""JSON config files: sections model, schedule, train, bench.

Parsing is strict (unknown keys rejected at every level) and round-trips
losslessly: dump(parse(dump(cfg))) == dump(cfg).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .schedule import MODES
from .training import SyntheticVideoSpec, TrainConfig


@dataclass(frozen=True)
class ScheduleConfig:
    shift: float = 7.0  # inference-time shift; training shift lives in train.shift

    def to_dict(self) -> dict:
        return {"shift": self.shift}

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleConfig":
        unknown = set(data) - {"shift"}
        if unknown:
            raise ConfigError(f"unknown schedule config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class BenchConfig:
    modes: tuple[str, ...] = ("baseline_full", "histream", "histream_plus")
    chunks: int = 7
    repeats: int = 3

    def __post_init__(self):
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown bench mode {mode!r}")
        if self.chunks < 1 or self.repeats < 1:
            raise ConfigError("bench chunks and repeats must be >= 1")

    def to_dict(self) -> dict:
        return {"modes": list(self.modes), "chunks": self.chunks, "repeats": self.repeats}

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown bench config keys: {sorted(unknown)}")
        if "modes" in data:
            data["modes"] = tuple(data["modes"])
        return cls(**data)


@dataclass(frozen=True)
class AppConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    video: SyntheticVideoSpec = field(default_factory=SyntheticVideoSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train["video"] = self.video.to_dict()
        return {
            "model": self.model.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train": train,
            "bench": self.bench.to_dict(),
        }


def parse_config(data: dict) -> AppConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - {"model", "schedule", "train", "bench"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = ModelConfig.from_dict(data.get("model", {}))
    schedule = ScheduleConfig.from_dict(data.get("schedule", {}))
    train_data = dict(data.get("train", {}))
    video = SyntheticVideoSpec.from_dict(train_data.pop("video", {}))
    train = TrainConfig.from_dict(train_data)
    bench_cfg = BenchConfig.from_dict(data.get("bench", {}))
    return AppConfig(model=model, schedule=schedule, train=train, video=video, bench=bench_cfg)


def load_config(path) -> AppConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def dump_config(cfg: AppConfig, path=None) -> str:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def default_config() -> AppConfig:
    """The CPU-trainable toy configuration."""
    return AppConfig()
