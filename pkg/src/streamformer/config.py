"""Model geometry and variant flags."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

FRAME_MS = 10


class ConfigError(ValueError):
    """A configuration field is missing, unknown or out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    """Encoder geometry. Sizes in time are counted in superframes ("slots").

    Defaults are a small desk-scale model that still exercises a short tail
    block and memory warm-up.
    """

    input_dim: int = 4
    stack_factor: int = 2
    model_dim: int = 16
    ffn_dim: int = 32
    num_layers: int = 3
    num_heads: int = 4
    block_size: int = 4
    lookahead: int = 1
    left_context: int = 8
    memory_slots: int = 2
    memory_offset: int = 2
    kernel: int = 3
    use_conv: bool = True
    use_macaron: bool = True
    use_talking_heads: bool = True
    precision: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f.name, f"expected an integer, got {value!r}")
            if f.type in ("bool", bool) and not isinstance(value, bool):
                raise ConfigError(f.name, f"expected true/false, got {value!r}")
        for name in ("input_dim", "stack_factor", "model_dim", "ffn_dim", "num_heads", "block_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("num_layers", "lookahead", "left_context", "memory_slots", "memory_offset"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError("num_heads", f"model_dim={self.model_dim} is not divisible by num_heads={self.num_heads}")
        if self.use_conv and self.kernel < 1:
            raise ConfigError("kernel", f"must be >= 1 when use_conv is set, got {self.kernel}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision", f"expected float64 or float32, got {self.precision!r}")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(str(key), "unknown configuration key")
        return cls(**dict(data))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        data = yaml.safe_load(Path(path).read_text())
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("<file>", "config must be a flat key: value mapping")
        for key, value in data.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(str(key), "nested values are not allowed")
        return cls.from_mapping(data)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def superframe_dim(self) -> int:
        return self.input_dim * self.stack_factor

    @property
    def slot_ms(self) -> int:
        return self.stack_factor * FRAME_MS

    @property
    def first_emission_ms(self) -> int:
        """Audio needed before the first block can be emitted."""
        return (self.block_size + self.lookahead) * self.slot_ms


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars in :class:`~streamformer.weights.ModelWeights`."""
    d, f, h = cfg.model_dim, cfg.ffn_dim, cfg.num_heads
    ffn = 2 * d * f + 2 * d
    per_layer = 4 * d * d + 2 * d  # attention + its input norm
    per_layer += ffn + 2 * d  # closing FFN + final norm
    if cfg.use_macaron:
        per_layer += ffn
    if cfg.use_talking_heads:
        per_layer += 2 * h * h
    if cfg.use_conv:
        per_layer += 2 * d * d + d * cfg.kernel + 2 * d + d * d + 2 * d
    if cfg.memory_slots > 0:
        per_layer += cfg.block_size
    return cfg.superframe_dim * d + cfg.num_layers * per_layer
