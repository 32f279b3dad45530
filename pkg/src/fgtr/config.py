"""Run configuration with CLI > environment > config file > default precedence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    db_path: Optional[str] = None
    db_format: Optional[str] = None  # sqlite | csv_dir | None (inferred)
    artifact_dir: str = "artifacts"
    k_iterations: int = 5
    theta: float = 0.6
    sigma: float = 0.85
    tau_join: float = 0.5
    merge_mode: str = "union"
    row_cap: int = 10_000
    seed: int = 0
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-small"
    prompt_dir: Optional[str] = None

    def validate(self) -> "RunConfig":
        if not 0 < self.theta <= 1:
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.k_iterations < 1:
            raise ConfigError("k_iterations must be >= 1")
        if not 0 <= self.sigma <= 1:
            raise ConfigError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.merge_mode not in ("union", "intersection"):
            raise ConfigError(f"merge_mode must be union or intersection, got {self.merge_mode}")
        if self.row_cap < 1:
            raise ConfigError("row_cap must be positive")
        return self


_ENV_PREFIX = "FGTR_CFG_"


def load_config(config_path: Optional[str] = None, **cli_overrides) -> RunConfig:
    """Merge defaults, config file, environment, and CLI flags (low to high)."""
    values: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        values.update(json.loads(path.read_text(encoding="utf-8")))
    field_types = {f.name: f.type for f in fields(RunConfig)}
    for name in field_types:
        env = os.environ.get(_ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = env
    for name, value in cli_overrides.items():
        if value is not None:
            values[name] = value
    known = {k: v for k, v in values.items() if k in field_types}
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in known.items()})
    return cfg.validate()


_INT_FIELDS = {"k_iterations", "row_cap", "seed"}
_FLOAT_FIELDS = {"theta", "sigma", "tau_join"}


def _coerce(name: str, value):
    if value is None:
        return None
    if name in _INT_FIELDS:
        return int(value)
    if name in _FLOAT_FIELDS:
        return float(value)
    return value
