"""Run configuration: one YAML/JSON document mapped onto nested dataclasses.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the field path,
e.g. ``satcl.temperature: must be > 0``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .classifiers import ClassifierSpec
from .cvae import CvaeConfig, InterpolationConfig
from .satcl import ContrastiveConfig
from .synthgen import GeneratorConfig
from .training import OptimizerConfig

METHODS = (
    "basic",
    "conventional_aug",
    "sudokusens",
    "sudokusens_minus_satcl",
    "sudokusens_minus_interp",
    "sudokusens_frozen_mask",
    "sudokusens_no_mask",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentConfig:
    window_s: float = 2.0
    overlap_s: float = 1.0


@dataclass(frozen=True)
class StftSection:
    window_s: float = 0.25
    hop_s: float = 0.125
    representation: str = "log_magnitude"


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data_dir: str | None = None
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    stft: StftSection = field(default_factory=StftSection)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    cvae_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=40, batch_size=32))
    interpolation: InterpolationConfig = field(default_factory=InterpolationConfig)
    satcl: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    families: tuple[str, ...] = ()
    methods: tuple[str, ...] = ("basic", "sudokusens")
    coverages: tuple[float, ...] = (100.0, 50.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    conventional_copies: int = 10
    diagnostics: bool = True
    output_dir: str | None = None

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for c in self.coverages:
            if not 0 < c <= 100:
                raise ValueError(f"coverages value {c} outside (0, 100]")

    @property
    def classifier_families(self) -> tuple[str, ...]:
        return tuple(self.families) or (self.classifier.family,)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _convert(a, value, path)
            except ConfigError as err:
                errors.append(str(err))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        item = args[0] if args else typing.Any
        return tuple(_convert(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown field")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _convert(hints[key], value, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        # validators phrase errors as "<field> must ...": attach them to that field's path
        head, _, rest = str(err).partition(" ")
        if head in names and rest:
            raise ConfigError(f"{path + '.' if path else ''}{head}: {rest}") from err
        raise ConfigError(f"{path or cls.__name__}: {err}") from err


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: not valid YAML/JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(RunConfig, data)


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    return obj


def config_hash(obj, exclude: tuple[str, ...] = ("output_dir",)) -> str:
    data = to_jsonable(obj)
    if isinstance(data, dict):
        data = {k: v for k, v in data.items() if k not in exclude}
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]
