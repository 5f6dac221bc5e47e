"""Training/evaluation configuration and the flat key=value config format.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Command-line flags override file values, which override the defaults below.
"""

import dataclasses
from dataclasses import dataclass

from .contrastive import TAU_INIT

__all__ = ["TrainConfig", "ConfigError", "config_to_text", "parse_config_text",
           "load_config"]


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class TrainConfig:
    # data / model geometry
    dim: int = 32
    proj_dim: int = 32
    frames: int = 4
    audio_tokens: int = 8
    fusion: str = "addition"
    modality: str = "both"          # both | video | audio (ablations)
    output_affine: bool = True
    temperature_init: float = TAU_INIT
    # optimization
    batch_size: int = 16
    epochs: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    cosine_decay: bool = True
    grad_clip: float = 1.0
    seed: int = 0
    # harness
    threads: int = 1
    eval_every: int = 0             # epochs between R@1 probes; 0 disables

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.dim < 1 or self.proj_dim < 1:
            raise ConfigError("dim and proj_dim must be positive")
        if self.modality not in ("both", "video", "audio"):
            raise ConfigError(f"modality must be both|video|audio, got {self.modality!r}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        from .fusion import FusionError, FusionKind
        try:
            FusionKind.parse(self.fusion)
        except FusionError as exc:
            raise ConfigError(str(exc)) from None
        return self


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name} expects true/false, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, overlaid with a config file, overlaid with explicit values."""
    values: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return TrainConfig(**values).validate()
