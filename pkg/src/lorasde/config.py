"""JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import lora
from .score_model import ModelConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


class ConfigNotFoundError(ConfigError):
    pass


@dataclass
class ModelSection:
    d_mel: int = 16
    hidden: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    d_c: int = 16
    d_s: int = 16
    ff_mult: int = 2
    time_dim: int = 32


@dataclass
class ScheduleSection:
    beta0: float = 0.05
    beta1: float = 20.0


@dataclass
class CorpusSection:
    n_speakers: int = 8
    n_heldout: int = 2
    utterances_per_speaker: int = 20
    frames_per_utterance: int = 64
    seed: int = 0


@dataclass
class PretrainSection:
    lr: float = 1e-3
    iterations: int = 3000
    batch_size: int = 16
    uncond_prob: float = 0.25
    seed: int = 0
    clip_grad: float | None = None


@dataclass
class FinetuneSection:
    lr: float = 1e-4
    iterations: int = 500
    seed: int = 0
    clip_grad: float | None = None


@dataclass
class LoraSection:
    rank: int = lora.DEFAULT_RANK
    alpha: float = lora.DEFAULT_ALPHA
    targets: str = lora.POLICY_ATTENTION


@dataclass
class GuidanceSection:
    strategy: str = "embed-cfg"
    gamma: float | None = None  # None: 1 for CFG kinds, 0 otherwise
    alpha_infer: float | None = None
    dt: float = 0.02


@dataclass
class EvalSection:
    n: int = 5
    sentences: int = 5
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    lora: LoraSection = field(default_factory=LoraSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**asdict(self.model), **asdict(self.schedule))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_value(key: str, value, default):
    if isinstance(default, bool) or value is None:
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, int):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float) or default is None:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def from_dict(doc: dict) -> RunConfig:
    """Build a config from a (partial) document; unknown keys raise ``ConfigError``."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    cfg = RunConfig()
    sections = {f.name for f in fields(RunConfig)}
    for name, body in doc.items():
        if name not in sections:
            raise ConfigError(f"unknown config key {name!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected an object")
        section = getattr(cfg, name)
        known = {f.name for f in fields(section)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key '{name}.{key}'")
            default = getattr(section, key)
            setattr(section, key, _check_value(f"{name}.{key}", value, default))
    try:
        cfg.model_config().validate()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFoundError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)
