"""Parameter containers shared by training, prediction and simulation.

Flat key names match the JSON config file accepted by the CLI.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Optional

BLOCK_SIZE = 4096

# speed-ratio estimator
SPEED_SMOOTHING = 0.3
SPEED_MIN = 0.25
SPEED_MAX = 4.0

MAX_SEARCH_DEPTH = 64
LAUNCH_WINDOW_MS = 2_000
PIN_TIMEOUT_MS = 480_000
QUEUE_CAPACITY = 65_536


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    delta_ms: int = 100
    tau: float = 0.9
    p_stop: float = 0.01
    p_download: float = 0.02
    lookahead_ms: int = 60_000
    containment: float = 0.9

    def __post_init__(self):
        if self.delta_ms <= 0:
            raise ConfigError("delta_ms must be positive")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        if not 0 < self.p_stop < 1:
            raise ConfigError("p_stop must lie in (0, 1)")
        if self.p_download < 0:
            raise ConfigError("p_download must be non-negative")
        if self.lookahead_ms < 0:
            raise ConfigError("lookahead_ms must be non-negative")
        if not 0 < self.containment <= 1:
            raise ConfigError("containment must lie in (0, 1]")


@dataclass(frozen=True)
class SimConfig:
    """Everything a simulation run needs. Times in the flat form the CLI uses."""

    delta_ms: int = 100
    tau: float = 0.9
    p_stop: float = 0.01
    p_download: float = 0.02
    lookahead_s: float = 60.0
    containment: float = 0.9
    min_superblock_size: int = 17
    b_initial_bytes: int = 0
    temp_limit_bytes: Optional[int] = None
    bandwidth_bps: float = 17.4e6
    rtt_ms: float = 100.0
    fp_window_s: float = 480.0
    speed_adaptation: bool = True
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ConfigError("bandwidth_bps must be positive")
        if self.rtt_ms < 0:
            raise ConfigError("rtt_ms must be non-negative")
        if self.fp_window_s <= 0:
            raise ConfigError("fp_window_s must be positive")
        if self.b_initial_bytes < 0:
            raise ConfigError("b_initial_bytes must be non-negative")
        if self.temp_limit_bytes is not None and self.temp_limit_bytes < 0:
            raise ConfigError("temp_limit_bytes must be non-negative")
        if self.min_superblock_size < 1:
            raise ConfigError("min_superblock_size must be >= 1")
        self.predictor()  # validates the shared fields

    @property
    def lookahead_ms(self) -> float:
        return self.lookahead_s * 1000.0

    @property
    def fp_window_ms(self) -> float:
        return self.fp_window_s * 1000.0

    def predictor(self) -> PredictorConfig:
        return PredictorConfig(
            delta_ms=self.delta_ms,
            tau=self.tau,
            p_stop=self.p_stop,
            p_download=self.p_download,
            lookahead_ms=int(round(self.lookahead_ms)),
            containment=self.containment,
        )

    def replace(self, **changes: Any) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**coerce(data))

    @classmethod
    def load(cls, path) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


TRAINING_KEYS = frozenset({"delta_ms", "tau", "min_superblock_size", "containment"})


def coerce(values: dict) -> dict:
    """Convert string or numeric values to the declared field types."""
    types = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    out = {}
    for key, value in values.items():
        kind = types.get(key, "")
        if value is None or value == "none":
            out[key] = None
        elif kind == "int" or kind == "Optional[int]":
            out[key] = int(float(value))
        elif kind == "float":
            out[key] = float(value)
        elif kind == "bool":
            out[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        else:
            out[key] = value
    return out

