"""Run configuration: nested dataclasses mirrored by the JSON config file.

Loading validates every section and rejects unknown keys; JSON arrays are
normalized to tuples so loaded configs compare equal to constructed ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .evaluate import EvalConfig
from .scene_sim import SimConfig


@dataclass
class ModelConfig:
    channels: int = 32
    hidden: int = 128
    n_pro: int = 100
    n_layers: int = 2
    n_heads: int = 4
    score_min: float = 0.05
    r_max: float = 55.0
    lambda_pro: float = 1.0
    no_object_weight: float = 0.1
    teacher_forcing_start: float = 0.5
    teacher_forcing_end: float = 0.0
    refresh_encodings: bool = True
    assign_radius: float = 1.5
    assign_sigma: float = 2.5
    level_range_edges: tuple[float, float, float] = (64.0, 128.0, 256.0)

    def __post_init__(self):
        self.level_range_edges = tuple(self.level_range_edges)
        if self.channels % self.n_heads:
            raise ConfigError("channels must divide evenly into heads")


@dataclass
class OptimConfig:
    lr: float = 6e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 12
    milestones: tuple[float, ...] = (0.7, 0.9)
    decay_factor: float = 0.1
    warmup_frac: float = 0.05
    clip_norm: float = 10.0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)


@dataclass
class ModeFlags:
    fixed_queries: bool = False
    disable_aux: bool = False
    disable_center_nms: bool = False
    disable_target_filtering: bool = False
    disable_teacher_forcing: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    modes: ModeFlags = field(default_factory=ModeFlags)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys in '{path}': {unknown}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


_SECTIONS = {"sim": SimConfig, "model": ModelConfig, "optim": OptimConfig,
             "eval": EvalConfig, "modes": ModeFlags}


def run_config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config keys at top level: {unknown}")
    kwargs = {"seed": int(data.get("seed", 0))}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _section(cls, data[name], name)
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return run_config_from_dict(json.load(fh))


def save_run_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(config), fh, indent=2)
