"""Experiment configuration: one JSON document, validated field by field."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .adaptor import AdaptorConfig
from .errors import ConfigError
from .subspace import MetaConfig
from .world import WorldConfig


@dataclass
class VisionConfig:
    d_e: int = 32
    d_v: int = 64
    noise_scale: float = 0.1


@dataclass
class LMSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    t_max: int = 64
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    max_position_offset: int = 8


@dataclass
class TestConfig:
    episodes: int = 50
    alpha: float | None = None  # None: use meta.alpha
    inner_steps: int | None = None
    n_way: int | None = None
    k_shot: int | None = None
    query: int | None = None
    cross_domain_seed: int = 1


@dataclass
class BaselineConfig:
    iterations: int | None = None  # None: same as meta.iterations
    batch_size: int | None = None  # None: samples seen per meta-iteration
    finetune: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    lm: LMSection = field(default_factory=LMSection)
    adaptor: AdaptorConfig = field(default_factory=AdaptorConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    test: TestConfig = field(default_factory=TestConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def to_json(self) -> dict:
        d = asdict(self)
        d["adaptor"]["prompt_lengths"] = list(self.adaptor.prompt_lengths)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))

    def validate(self) -> None:
        if len(self.adaptor.prompt_lengths) != 3 or min(self.adaptor.prompt_lengths) < 1:
            raise ConfigError("adaptor.prompt_lengths: three positive lengths required")
        if self.adaptor.heads < 1 or self.lm.d_model % self.adaptor.heads:
            raise ConfigError("adaptor.heads must divide lm.d_model")
        if self.lm.d_model % self.lm.n_heads:
            raise ConfigError("lm.n_heads must divide lm.d_model")
        for name in ("d_e", "d_v"):
            if getattr(self.vision, name) < 1:
                raise ConfigError(f"vision.{name} must be positive")
        if self.vision.noise_scale < 0:
            raise ConfigError("vision.noise_scale must be non-negative")
        if self.lm.epochs < 0 or not self.lm.lr > 0:
            raise ConfigError("lm.epochs >= 0 and lm.lr > 0 required")
        if self.test.episodes < 1:
            raise ConfigError("test.episodes must be >= 1")
        try:
            self.meta.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc)) from None
        need = self.meta.k_shot + self.meta.query_size
        if self.world.per_category < need:
            raise ConfigError(f"world.per_category must be >= k_shot + query = {need}")


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(section: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{section}.{key}: expected true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{section}.{key}: expected an integer")
        elif isinstance(default, float):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{section}.{key}: expected a number")
            val = float(val)
        elif isinstance(default, tuple):
            if not isinstance(val, list) or not all(isinstance(v, int) for v in val):
                raise ConfigError(f"{section}.{key}: expected a list of integers")
            val = tuple(val)
        elif isinstance(default, str):
            if not isinstance(val, str):
                raise ConfigError(f"{section}.{key}: expected a string")
        elif val is not None and not isinstance(val, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number or null")
        out[key] = val
    return cls(**out)


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, val in d.items():
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section")
        if key == "seed":
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError("seed: expected an integer")
            kwargs[key] = val
        else:
            kwargs[key] = _coerce(key, type(getattr(ExperimentConfig(), key)), val)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def toy_config(seed: int = 0) -> ExperimentConfig:
    """Setting for the comparative seed sweeps.

    Inner and outer learning rates stay at their defaults; the LM schedule is
    shorter and the meta-batch is halved so 300 outer steps fit the time budget.
    """
    cfg = ExperimentConfig(seed=seed)
    cfg.lm.epochs = 10
    cfg.meta.batch = 16
    cfg.meta.iterations = 300
    cfg.test.episodes = 40
    return cfg
