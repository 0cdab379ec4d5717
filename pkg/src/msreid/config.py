"""Single JSON run configuration shared by every CLI command.

Precedence: command-line overrides > config file > defaults. Unknown keys are
rejected with the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .data import AugmentConfig, SpectraSet, SyntheticConfig
from .encoders import ModelConfig
from .errors import ConfigError
from .losses import LossConfig
from .trainer import ComponentFlags, TrainConfig


@dataclass
class PathsConfig:
    data_dir: str = "data"
    output_dir: str = "runs/default"
    manifest: str | None = None  # defaults to <data_dir>/manifest.jsonl


@dataclass
class EvalConfig:
    protocol: str = "standard"
    same_camera: bool = False
    query_in_gallery: bool = True

    def validate(self):
        if self.protocol not in ("standard", "strict"):
            raise ConfigError(f"protocol must be standard|strict, got {self.protocol!r}", field="eval.protocol")


@dataclass
class RunConfig:
    seed: int | None = None
    spectra: tuple = ("rgb", "nir", "tir")
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    components: ComponentFlags = field(default_factory=ComponentFlags)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self, require_seed=True):
        if require_seed and self.seed is None:
            raise ConfigError("seed is required", field="seed")
        if self.data.seed is None:
            self.data.seed = self.seed
        SpectraSet(tuple(self.spectra))
        self.data.validate()
        self.augment.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()
        return self

    @property
    def spectra_set(self):
        return SpectraSet(tuple(self.spectra))

    @property
    def manifest_path(self):
        return Path(self.paths.manifest) if self.paths.manifest else Path(self.paths.data_dir) / "manifest.jsonl"

    def to_dict(self):
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})", field="<file>") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object", field="<file>")
        return cls.from_dict(raw)

    def with_overrides(self, assignments):
        """Apply ``section.key=value`` overrides; values parse as JSON, falling back to strings."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}", field=item)
            key, value = item.split("=", 1)
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section '{p}' in override {key}", field=key)
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key '{key}'", field=key)
            node[parts[-1]] = parsed
        return RunConfig.from_dict(data)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _default_of(f):
    if f.default is not MISSING:
        return copy.deepcopy(f.default)
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix.rstrip('.') or '<root>'}' must be an object", field=prefix.rstrip("."))
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'", field=f"{prefix}{unknown[0]}")
    kwargs = {}
    for name, f in known.items():
        default = _default_of(f)
        if name not in data:
            kwargs[name] = default
            continue
        value = data[name]
        path = f"{prefix}{name}"
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, path + ".")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"'{path}' must be a list", field=path)
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"'{path}' must be true/false", field=path)
            kwargs[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{path}' must be a number", field=path)
            kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)

