"""Training configuration and its plain-text ``key=value`` form.

Every default lives in :class:`TrainConfig`. Values are resolved with the
precedence command-line flag > config file > default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from wisernet.exceptions import ConfigurationError, UsageError
from wisernet.segnet import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    # losses
    ds_weights: Tuple[float, ...] = (0.2, 0.2, 0.1)
    warmup_epochs: int = 5
    ramp_epochs: int = 10
    lambda_max: float = 0.1
    dice_smooth: float = 1.0
    weighted_dice: bool = False
    # architecture
    depth: int = 4
    base_width: int = 8
    wiser_enabled: bool = True
    ds_enabled: bool = True
    alpha: float = 0.5
    beta: float = 0.5
    eps_gate: float = 0.25
    kappa: float = 1.0
    a0: float = 0.25
    # data and evaluation
    input_size: int = 64
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience", "ramp_epochs", "input_size", "depth", "base_width"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be non-negative")
        if self.patience > self.epochs:
            raise ConfigurationError(f"patience {self.patience} exceeds epochs {self.epochs}")
        if any(w < 0 for w in self.ds_weights) or self.lambda_max < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.ds_enabled and len(self.ds_weights) != self.depth - 1:
            raise ConfigurationError(
                f"deep supervision needs {self.depth - 1} weights for depth {self.depth}, got {len(self.ds_weights)}"
            )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            base_width=self.base_width,
            wiser_enabled=self.wiser_enabled,
            ds_enabled=self.ds_enabled,
            alpha=self.alpha,
            beta=self.beta,
            eps_gate=self.eps_gate,
            kappa=self.kappa,
            a0=self.a0,
            seed=self.seed,
        )

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise UsageError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc


def parse_text(text: str) -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno} is not key=value: {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def load_config_file(path) -> Dict[str, object]:
    return parse_text(Path(path).read_text())


def resolve_config(
    file_values: Optional[Mapping[str, object]] = None,
    overrides: Optional[Mapping[str, object]] = None,
    base: Optional[TrainConfig] = None,
) -> TrainConfig:
    """Merge defaults, then file values, then explicit overrides (``None`` skipped)."""
    merged = dict(asdict(base or TrainConfig()))
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    merged["ds_weights"] = tuple(merged["ds_weights"])
    return TrainConfig(**merged)


def write_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(cfg.to_text())


def read_config(path) -> TrainConfig:
    return resolve_config(load_config_file(path))
