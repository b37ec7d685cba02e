"""Run configuration: one YAML document, strict keys, every field defaulted."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str | None = None
    eval_path: str | None = None
    format: str | None = None
    sentinels: list = field(default_factory=list)
    normalization: str = "standardize"
    window: int | None = None
    stride: int | None = None
    labels_path: str | None = None


@dataclass
class DiffusionSection:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class TrainingSection:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    mask_probs: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    grad_clip: float = 1.0
    log_every: int = 200


@dataclass
class TaskSection:
    kind: str = "forecast"
    horizon: int = 24
    ratio: float = 0.25
    ratios: list = field(default_factory=lambda: [0.125, 0.25, 0.375, 0.5])
    sweep: bool = False
    mask_path: str | None = None
    n_samples: int | None = None
    n_generate: int = 16
    length: int | None = None
    scores: bool = False
    window: int = 100
    percentile: float = 99.0
    percentiles: list = field(default_factory=list)
    q_window: int = 3
    n_neighbor: int = 2
    z_thresh: float = 3.0
    passes: int = 2
    block: int = 2
    seed: int = 0


@dataclass
class PhysicsSection:
    family: str = "advection"
    dx: float = 1 / 16
    dt: float = 0.025
    coeffs: dict = field(default_factory=dict)
    alpha: float = 1.0
    step: float = 1e-3
    iters: int = 50
    logp_mc_samples: int = 4
    t_band: str = "low"
    seed: int = 0
    enabled: bool = False


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    task: TaskSection = field(default_factory=TaskSection)
    physics: PhysicsSection | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "data": DataSection,
    "model": ModelConfig,
    "diffusion": DiffusionSection,
    "training": TrainingSection,
    "task": TaskSection,
    "physics": PhysicsSection,
}


def _line(node) -> int:
    return node.start_mark.line + 1


def _check_type(name: str, value, default, where: str):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
        value = type(default)(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: {name} should be {type(default).__name__}, got {value!r}")
    return value


def _build(cls, node: yaml.MappingNode, section: str, src: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{src}:{_line(node)}: section '{section}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key_node, val_node in node.value:
        key = key_node.value
        where = f"{src}:{_line(key_node)}"
        if key not in fields:
            raise ConfigError(f"{where}: unknown key '{key}' in section '{section}'")
        if key in kwargs:
            raise ConfigError(f"{where}: duplicate key '{key}' in section '{section}'")
        value = yaml.safe_load(yaml.serialize(val_node))
        kwargs[key] = _check_type(f"{section}.{key}", value, getattr(defaults, key), where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{src}:{_line(node)}: section '{section}': {exc}") from None


def parse_config(text: str, src: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{src}: YAML syntax error: {exc}") from None
    if root is None:
        return RunConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{src}:{_line(root)}: top level must be a mapping of sections")
    parts = {}
    for key_node, val_node in root.value:
        name = key_node.value
        if name not in SECTIONS:
            raise ConfigError(f"{src}:{_line(key_node)}: unknown section '{name}' (expected one of {sorted(SECTIONS)})")
        parts[name] = _build(SECTIONS[name], val_node, name, src)
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))
