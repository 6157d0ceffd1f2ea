"""Experiment configuration: strict JSON loading and a published schema.

Configs are plain dataclasses.  :func:`from_dict` rejects unknown keys at
any depth, and :func:`json_schema` derives an equivalent JSON Schema from
the same type annotations so files can be checked with standard tools.
"""

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .network import MlpConfig
from .scenes import SceneSpec
from .sensor import Geometry, SensorConfig, preset
from .trainer import TrainConfig

KINDS = ("mincam_sweep", "baseline_sweep", "ablation_no_sensor", "prune")


@dataclass(frozen=True)
class DataConfig:
    train: int = 100_000
    val: int = 10_000
    test: int = 25_000
    dir: str | None = None
    generate: bool = True


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple[int, ...] = (128, 128)
    leak: float = 0.01
    head: str = "classification"


@dataclass(frozen=True)
class PruneConfig:
    k: int = 16
    target_k: int = 1
    finetune_epochs: int = 3
    checkpoint: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "mincam_sweep"
    seed: int = 0
    output_dir: str | None = None
    sensor_preset: str = "hardware"
    sensor: dict = field(default_factory=dict)
    scene: SceneSpec = field(default_factory=SceneSpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pixel_counts: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)
    baseline_resolutions: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    ablation_k: int = 4
    prune: PruneConfig = field(default_factory=PruneConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.pixel_counts or not self.baseline_resolutions:
            raise ConfigError("pixel_counts and baseline_resolutions must be non-empty")
        if any(k < 1 for k in self.pixel_counts) or self.ablation_k < 1:
            raise ConfigError("pixel counts must be >= 1")
        for r in self.baseline_resolutions:
            if r < 1 or self.scene.height % r or self.scene.width % r:
                raise ConfigError(f"baseline resolution {r} does not divide the "
                                  f"{self.scene.height}x{self.scene.width} grid")
        if min(self.data.train, self.data.val, self.data.test) < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if not 1 <= self.prune.target_k < self.prune.k:
            raise ConfigError(f"prune.target_k must lie in [1, prune.k), got {self.prune.target_k}")
        self.sensor_config()  # validates preset name and overrides

    def sensor_config(self):
        base = preset(self.sensor_preset)
        unknown = set(self.sensor) - {f.name for f in dataclasses.fields(SensorConfig)}
        if unknown:
            raise ConfigError(f"unknown sensor keys: {sorted(unknown)}")
        merged = base.to_dict() | dict(self.sensor)
        if isinstance(self.sensor.get("geometry"), dict) and base.geometry is not None:
            merged["geometry"] = dataclasses.asdict(base.geometry) | self.sensor["geometry"]
        return SensorConfig.from_dict(merged)

    def mlp_config(self, k):
        return MlpConfig(input_width=k, hidden=self.net.hidden, leak=self.net.leak, head=self.net.head,
                         num_classes=self.scene.num_classes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        """Identity of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("kind")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def data_digest(self):
        d = {"seed": self.seed, "scene": dataclasses.asdict(self.scene),
             "sizes": [self.data.train, self.data.val, self.data.test]}
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def output_root(self, override=None):
        root = override or self.output_dir or os.environ.get("MINCAM_OUT") or "mincam-out"
        return Path(root)


# ------------------------------------------------------------ strict loading


def _strip_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _convert(tp, value, path):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, list | tuple):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def from_dict(cls, data, path="config"):
    """Build dataclass ``cls`` from parsed JSON, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _schema_for(tp):
    tp, optional = _strip_optional(tp)
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        s = {"type": "object", "additionalProperties": False,
             "properties": {f.name: _schema_for(hints[f.name]) for f in dataclasses.fields(tp)}}
    elif origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            s = {"type": "array", "items": _schema_for(args[0])}
        else:
            s = {"type": "array", "prefixItems": [_schema_for(a) for a in args],
                 "minItems": len(args), "maxItems": len(args)}
    elif tp is bool:
        s = {"type": "boolean"}
    elif tp is int:
        s = {"type": "integer"}
    elif tp is float:
        s = {"type": "number"}
    elif tp is str:
        s = {"type": "string"}
    else:
        s = {"type": "object"}
    if optional:
        s = {"anyOf": [s, {"type": "null"}]}
    return s


def json_schema():
    schema = _schema_for(ExperimentConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "mincam experiment config"
    schema["properties"]["kind"]["enum"] = list(KINDS)
    sensor_hints = typing.get_type_hints(SensorConfig)
    schema["properties"]["sensor"] = {
        "type": "object", "additionalProperties": False,
        "properties": {f.name: _schema_for(sensor_hints[f.name]) for f in dataclasses.fields(SensorConfig)},
    }
    schema["properties"]["sensor"]["properties"]["geometry"] = {
        "anyOf": [_schema_for(Geometry), {"type": "null"}]}
    return schema


def load_config(path_or_dict):
    """Parse, schema-check and construct an :class:`ExperimentConfig`."""
    if isinstance(path_or_dict, dict):
        data = path_or_dict
    else:
        try:
            text = Path(path_or_dict).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path_or_dict}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path_or_dict}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(data, json_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config does not match schema at {where}: {exc.message}") from None
    return from_dict(ExperimentConfig, data)
