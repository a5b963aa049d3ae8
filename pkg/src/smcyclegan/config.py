"""Run configuration document shared by every CLI command.

Example (every key optional; unknown keys are rejected)::

    seed: 3                  # when set, overrides toy/segmenter/train seeds
    image_size: 32
    paths: {data_root: data/toy, out: runs/toy, segmenter: null}
    toy: {count: 200, image_size: 32, shape: disk}
    segmenter: {epochs: 15, learning_rate: 0.05}
    train: {epochs: 100, lambda: 10, pool_size: 3}
    evaluation: {extractor: randconv, input_size: 32}
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import DomainStyle, ToySpec
from .errors import ConfigError, StorageError
from .segmenter import SegTrainConfig
from .training import TrainConfig


@dataclass
class Paths:
    data_root: str | None = None
    out: str | None = None
    segmenter: str | None = None  # None: <out>/segmenter.smcg


@dataclass
class EvalSettings:
    extractor: str = "randconv"
    input_size: int = 32


@dataclass
class RunConfig:
    seed: int | None = None
    image_size: int = 256
    paths: Paths = field(default_factory=Paths)
    toy: ToySpec = field(default_factory=ToySpec)
    segmenter: SegTrainConfig = field(default_factory=SegTrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.image_size <= 0:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if self.seed is not None:
            self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        self.seed = seed
        self.toy.seed = seed
        self.segmenter.seed = seed
        self.train.seed = seed

    @property
    def segmenter_path(self) -> Path:
        if self.paths.segmenter:
            return Path(self.paths.segmenter)
        return self.out_dir / "segmenter.smcg"

    @property
    def out_dir(self) -> Path:
        if not self.paths.out:
            raise ConfigError("no output directory: set paths.out or pass --out")
        return Path(self.paths.out)


_RENAMES = {TrainConfig: {"lambda": "lam"}}
_NESTED = {
    RunConfig: {"paths": Paths, "toy": ToySpec, "segmenter": SegTrainConfig, "train": TrainConfig,
                "evaluation": EvalSettings},
    ToySpec: {"domain_x": DomainStyle, "domain_y": DomainStyle},
}


def _build(cls, values, where: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    renames = _RENAMES.get(cls, {})
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        name = renames.get(key, key)
        if key in renames.values() or name not in known:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        sub = _NESTED.get(cls, {}).get(name)
        if sub is not None:
            value = _build(sub, value, f"{where}.{key}" if where else key)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where or 'config'}: {exc}") from exc


def parse_config(values: dict | None) -> RunConfig:
    return _build(RunConfig, values or {}, "")


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        values = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(values)


def _plain(value):
    if dataclasses.is_dataclass(value):
        value = asdict(value)
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_document(config: RunConfig) -> dict:
    doc = _plain(config)
    doc["train"] = {("lambda" if k == "lam" else k): v for k, v in doc["train"].items()}
    return doc


def dump_config(config: RunConfig, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(config_document(config), sort_keys=False))
    except OSError as exc:
        raise StorageError(f"cannot write effective config {path}: {exc}") from exc
