"""Flat ``key=value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .train import TrainPlan


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: Optional[str] = None
    out_dir: str = "runs"
    seed: Optional[int] = None
    # model
    d: int = 32
    n_layers: int = 4
    n_heads: int = 8
    max_len: int = 50
    dropout: float = 0.3
    ffn_hidden: Optional[int] = None
    per_head_scale: bool = False
    # optimizer
    lr: float = 1e-3
    l2: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    # plan
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 1024
    train_neg_ratio: int = 4
    eval_negatives: int = 99
    min_interactions: int = 5
    market: Optional[str] = None

    def model_config(self, n_items: int, n_markets: int) -> ModelConfig:
        return ModelConfig(
            n_items=n_items,
            n_markets=n_markets,
            d=self.d,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_len=self.max_len,
            dropout_rate=self.dropout,
            ffn_hidden=self.ffn_hidden,
            per_head_scale=self.per_head_scale,
        )

    def plan(self, phase: str, market: Optional[int], seed: int) -> TrainPlan:
        return TrainPlan(
            phase=phase,
            market=market,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            seed=seed,
            lr=self.lr,
            l2=self.l2,
            beta1=self.beta1,
            beta2=self.beta2,
        )

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (--seed or seed=...)")
        return self.seed

    def require_data(self) -> Path:
        if self.data is None:
            raise ConfigError("no data path given (--data or data=...)")
        path = Path(self.data)
        if not path.is_file():
            raise ConfigError(f"data file {path} does not exist")
        return path

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={'' if value is None else value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if raw == "" and "Optional" in kind:
        return None
    try:
        if "bool" in kind:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(path: Optional[str], overrides: dict) -> RunConfig:
    """File values first, then non-None overrides (flags win)."""
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for key, value in overrides.items():
        if value is not None:
            if key not in _FIELDS:
                raise ConfigError(f"unknown setting {key!r}")
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    cfg = dataclasses.replace(RunConfig(), **values)
    if cfg.d % cfg.n_heads:
        raise ConfigError(f"d={cfg.d} must be divisible by n_heads={cfg.n_heads}")
    return cfg
