"""Run configuration: ``key = value`` files with ``#`` comments, plus overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .model import ModelConfig

LOSS_SCOPES = ("masked_only", "all")


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    mask_ratio: float = 0.75
    loss_scope: str = "masked_only"
    seed: int = 0
    n_patches: int = 8
    crops_per_clip: int = 25
    augment: bool = True
    weight_decay: float = 0.01
    checkpoint_every: int = 0
    threads: int = 0
    # model shape
    fe_channels: tuple = (16, 32, 64, 128, 256)
    hidden: int = 256
    layers: int = 8
    heads: int = 4
    ffn: int = 1024
    max_seq_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}, got {self.loss_scope!r}")
        if self.n_patches < 2:
            raise ConfigError("n_patches must be >= 2")
        if self.n_patches + 1 > self.max_seq_len:
            raise ConfigError(f"n_patches + CLS ({self.n_patches + 1}) exceeds max_seq_len {self.max_seq_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        self.fe_channels = tuple(int(c) for c in self.fe_channels)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            fe_channels=self.fe_channels,
            hidden=self.hidden,
            layers=self.layers,
            heads=self.heads,
            ffn=self.ffn,
            max_seq_len=self.max_seq_len,
            dropout=self.dropout,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        return {f.name: format_value(getattr(self, f.name)) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(name: str, default: Any, raw: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(raw: Mapping[str, Any] | None = None, **overrides) -> TrainConfig:
    """Resolve file values then overrides (overrides win); unknown keys raise."""
    defaults = TrainConfig.__dataclass_fields__
    values = {}
    merged = dict(raw or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in merged.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        default = defaults[key].default
        values[key] = _coerce(key, default, value) if isinstance(value, str) else value
    return TrainConfig(**values)


def load_config(path: str | Path | None, **overrides) -> TrainConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw = parse_config_text(p.read_text(), str(p))
    return build_config(raw, **overrides)
