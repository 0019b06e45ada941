"""
Run configuration
defaults < KEY=value config file < WEFT_* environment < command-line flags
"""

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from scripts.losses import LossConfig
from scripts.model import ModelConfig
from utils.config import ENV_PREFIX, ConfigError, dump_env, overrides_from, read_config_file, unknown_keys


@dataclass
class ScheduleConfig:
    seed: int = 0
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    eval_every: int = 50
    train_count: int = 64
    heldout_count: int = 16

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"STEPS must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("BATCH_SIZE and EVAL_EVERY must be >= 1")
        if self.train_count < 1 or self.heldout_count < 1:
            raise ConfigError("TRAIN_COUNT and HELDOUT_COUNT must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"LR must be > 0 and WEIGHT_DECAY >= 0, got {self.lr}, {self.weight_decay}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"SEED must fit in 64 bits, got {self.seed}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def validate(self):
        self.model.validate()
        try:
            self.loss.validate()
        except ValueError as e:
            raise ConfigError(str(e))
        self.schedule.validate()
        return self

    def replace(self, **changes) -> "RunConfig":
        """Copy with field changes routed to whichever section owns each name"""
        sections = {}
        for section in ("model", "loss", "schedule"):
            current = getattr(self, section)
            names = {f.name for f in dataclasses.fields(current)}
            sections[section] = dataclasses.replace(current, **{k: v for k, v in changes.items() if k in names})
        unknown = set(changes) - {f.name for s in sections.values() for f in dataclasses.fields(s)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return RunConfig(**sections).validate()

    def to_env(self) -> str:
        return "\n".join(f"# {name}\n{dump_env(getattr(self, name))}" for name in ("model", "loss", "schedule"))


def load_run_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    file_values = read_config_file(path) if path else {}
    unknown = unknown_keys(file_values, ModelConfig, LossConfig, ScheduleConfig)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {unknown}")
    file_values = {k.upper(): v for k, v in file_values.items()}
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}

    sections = {}
    for section, cls in (("model", ModelConfig), ("loss", LossConfig), ("schedule", ScheduleConfig)):
        names = {f.name for f in dataclasses.fields(cls)}
        values = overrides_from(file_values, cls)
        values.update(overrides_from(environ, cls, ENV_PREFIX))
        values.update({k: v for k, v in flags.items() if k in names})
        sections[section] = cls(**values)
    stray = set(flags) - {f.name for cls in (ModelConfig, LossConfig, ScheduleConfig) for f in dataclasses.fields(cls)}
    if stray:
        raise ConfigError(f"unknown overrides: {sorted(stray)}")
    return RunConfig(**sections).validate()
