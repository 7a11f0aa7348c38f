"""Training configuration: defaults, file loading, CLI overrides.

The config file is a JSON document with a schema_version; any field can be
overridden from the command line. Stage defaults follow the pipeline
conventions: 6 denoising / 6 temporal decoder blocks, clip lengths 5 and
21, weighted-average noise at probability 0.8 (0.5 is the short-schedule
setting), lambda weights (2.0, 2.0, 5.0, 5.0), and a step learning-rate
decay to one tenth at 70% of the iterations.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .matching import LossWeights
from .noiser import NoiseConfig

CONFIG_SCHEMA_VERSION = 1

STAGE_DEFAULTS = {
    "tracker": {"clip_length": 5, "iterations": 2000},
    "refiner": {"clip_length": 21, "iterations": 1000},
}

OPTIMIZER_DEFAULT_LR = {"adam": 2e-3, "sgd": 0.05}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str
    dataset_dir: str
    out_checkpoint: str
    tracker_checkpoint: str | None = None
    clip_length: int | None = None
    iterations: int | None = None
    learning_rate: float | None = None
    decay_point: float = 0.7
    decay_factor: float = 0.1
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "adam"
    seed: int = 0
    channels: int = 64
    heads: int = 8
    block_count: int = 6
    memory_bank_capacity: int = 256
    clip_grad_norm: float = 3.0

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {self.stage!r}")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.optimizer not in OPTIMIZER_DEFAULT_LR:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_length is None:
            self.clip_length = defaults["clip_length"]
        if self.iterations is None:
            self.iterations = defaults["iterations"]
        if self.learning_rate is None:
            self.learning_rate = OPTIMIZER_DEFAULT_LR[self.optimizer]
        if self.stage == "tracker" and self.clip_length < 2:
            raise ConfigError("tracker stage needs clip_length >= 2")
        if self.stage == "refiner" and not self.tracker_checkpoint:
            raise ConfigError("refiner stage requires a tracker checkpoint")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["schema_version"] = CONFIG_SCHEMA_VERSION
        return out

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "TrainConfig":
        data = dict(data)
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        if overrides:
            for key, value in overrides.items():
                if value is None:
                    continue
                if key.startswith("noise_"):
                    noise = dict(data.get("noise") or {})
                    noise[key.removeprefix("noise_")] = value
                    data["noise"] = noise
                else:
                    data[key] = value
        noise = data.pop("noise", None) or {}
        weights = data.pop("weights", None) or {}
        known = {f.name for f in dataclasses.fields(cls)} - {"noise", "weights"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(noise=NoiseConfig(**noise), weights=LossWeights(**weights), **data)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        with open(path) as f:
            data = json.load(f)
        return cls.from_dict(data, overrides)


def learning_rate_at(iteration: int, config: TrainConfig) -> float:
    """Step decay: drops by decay_factor at decay_point of the run."""
    boundary = int(round(config.decay_point * config.iterations))
    lr = config.learning_rate
    return lr * config.decay_factor if iteration >= boundary else lr
