"""Single-document JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import InvalidConfig


@dataclass
class ModelSection:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4


@dataclass
class EnvSection:
    n_keys: int = 6
    n_values: int = 6
    n_pairs: int = 4


@dataclass
class LossSection:
    alpha: float = 0.15
    beta: float = 0.15
    epsilon: float = 1e-6


@dataclass
class TrainSection:
    steps: int = 500
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    layers: list | None = None
    query_set: str = "response"


@dataclass
class RLSection:
    group_size: int = 8
    clip_range: float = 0.2
    kl_coeff: float = 0.01
    lr: float = 1e-3
    steps: int = 200
    prompts_per_step: int = 8
    epochs_per_batch: int = 2
    max_new: int = 3
    optimizer: str = "adam"
    lambda_v: float = 0.3
    lambda_f: float = 0.1
    epsilon: float = 1e-6
    cold_steps: int = 500


@dataclass
class InterventionSection:
    gamma: float = 0.5
    layers: list | None = None
    mode: str = "proportional"


@dataclass
class SynthSection:
    endpoint: str | None = None
    templates_dir: str | None = None
    anchor_mode: str = "rule"
    every_k: int = 3
    max_tokens: int = 1024
    temperature: float = 0.0
    lexicon: list | None = None


@dataclass
class PathsSection:
    init_checkpoint: str | None = None
    checkpoint: str | None = None
    history: str | None = None
    log: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    env: EnvSection = field(default_factory=EnvSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    rl: RLSection = field(default_factory=RLSection)
    intervention: InterventionSection = field(default_factory=InterventionSection)
    synth: SynthSection = field(default_factory=SynthSection)
    paths: PathsSection = field(default_factory=PathsSection)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def validate_paths(cfg: RunConfig) -> RunConfig:
    """Inputs must exist and outputs must have an existing parent, checked before any work."""
    if cfg.paths.init_checkpoint and not Path(cfg.paths.init_checkpoint).is_file():
        raise InvalidConfig(f"init_checkpoint not found: {cfg.paths.init_checkpoint}")
    if cfg.synth.templates_dir and not Path(cfg.synth.templates_dir).is_dir():
        raise InvalidConfig(f"templates_dir not found: {cfg.synth.templates_dir}")
    for name in ("checkpoint", "history", "log"):
        p = getattr(cfg.paths, name)
        if p and not Path(p).resolve().parent.is_dir():
            raise InvalidConfig(f"output directory for {name} does not exist: {p}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
    return validate_paths(parse_config(data))
