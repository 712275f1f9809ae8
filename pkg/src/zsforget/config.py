"""Experiment configuration: YAML with a schema version, strict keys and filled defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoders import InputError
from .forget import EMBEDDING_REG, LIPSCHITZ, UNIMODAL, ForgetConfig

SCHEMA_VERSION = 1
METHODS = ("lip", "emb", "ulip", "all_params", "amns", "amns_retain", "emmn")
ZS_TYPE = {
    "lip": "ZS",
    "emb": "ZS",
    "ulip": "ZS",
    "all_params": "ZS",
    "amns": "ZS",
    "emmn": "ZS",
    "amns_retain": "not_ZS",
}
METHOD_LABELS = {
    "lip": "Lip",
    "emb": "Emb",
    "ulip": "ULip",
    "all_params": "AllParamsVary",
    "amns": "Amns",
    "amns_retain": "AmnsRetain",
    "emmn": "EMMN",
}
_METHOD_LOSS = {"lip": LIPSCHITZ, "all_params": LIPSCHITZ, "emb": EMBEDDING_REG, "ulip": UNIMODAL}


class ConfigError(InputError):
    """Invalid configuration; ``key`` is a dotted path and ``line`` 1-based (or None)."""

    def __init__(self, message: str, key: str = "", line: int | None = None):
        where = f" (key '{key}'" + (f", line {line}" if line else "") + ")" if key else ""
        super().__init__(message + where)
        self.key = key
        self.line = line


@dataclass
class ModelSpec:
    source: str = "toy"
    checkpoint: str | None = None
    seed: int = 0
    epochs: int = 40
    learning_rate: float = 3e-3
    embed_dim: int = 32
    logit_scale: float = 10.0
    norm_weight: float = 0.1

    def __post_init__(self):
        if self.source not in ("toy", "checkpoint"):
            raise InputError("source must be 'toy' or 'checkpoint'")
        if self.source == "checkpoint" and not self.checkpoint:
            raise InputError("source 'checkpoint' needs a checkpoint path")


@dataclass
class DataSpec:
    kinds: list[str] = field(default_factory=lambda: ["shapes", "patterns"])
    per_class: int = 60
    test_fraction: float = 0.34
    seed: int = 0
    image_size: int = 16

    def __post_init__(self):
        if not self.kinds or len(set(self.kinds)) != len(self.kinds):
            raise InputError("kinds must be a nonempty list without repeats")
        if not 0 < self.test_fraction < 1:
            raise InputError("test_fraction must be in (0, 1)")


@dataclass
class CalibrationSpec:
    prob_low: float = 0.4
    prob_high: float = 0.9
    max_extra_steps: int = 200


@dataclass
class SynthSpec:
    count: int = 64
    step_size: float = 0.5
    max_steps: int = 3000
    seed: int = 0
    calibration: CalibrationSpec | None = None

    def __post_init__(self):
        if self.count < 1 or self.step_size <= 0 or self.max_steps < 1:
            raise InputError("count, step_size and max_steps must be positive")


@dataclass
class EvalSpec:
    template: str = "a photo of a {}"
    weighting: str = "image"
    retrieval_ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    rank_shift: bool = True

    def __post_init__(self):
        if self.weighting not in ("image", "class"):
            raise InputError("weighting must be 'image' or 'class'")
        if any(k < 1 for k in self.retrieval_ks):
            raise InputError("retrieval_ks must be positive")


@dataclass
class BaselineSpec:
    epochs: int = 5
    learning_rate: float = 1e-3
    label_remap_seed: int = 0
    batch_size: int = 16
    retain_per_class: int = 8
    emmn_samples_per_class: int = 8


@dataclass
class ExperimentConfig:
    target_classes: list[str]
    schema_version: int = SCHEMA_VERSION
    name: str = ""
    method: str = "lip"
    target_dataset: str = "shapes"
    output_dir: str = "runs"
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    synth: SynthSpec = field(default_factory=SynthSpec)
    forget: ForgetConfig = field(default_factory=ForgetConfig)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise InputError(f"unsupported schema_version {self.schema_version}")
        if self.method not in METHODS:
            raise InputError(f"method must be one of {list(METHODS)}")
        if not self.target_classes:
            raise InputError("target_classes must name at least one class")
        if len(set(self.target_classes)) != len(self.target_classes):
            raise InputError("target_classes has duplicates")
        if self.target_dataset not in self.data.kinds:
            raise InputError(f"target_dataset {self.target_dataset!r} not among data.kinds")

    @property
    def method_label(self) -> str:
        return METHOD_LABELS[self.method]

    @property
    def forgetting_type(self) -> str:
        return ZS_TYPE[self.method]

    def to_dict(self) -> dict:
        return _plain(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def eval_signature(self) -> str:
        """Hash of everything that determines the evaluation sets and BF model."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in ("model", "data", "eval", "target_dataset")}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _line_index(text: str) -> dict[tuple, int]:
    """Dotted key path -> 1-based line of the key in the YAML source."""
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                p = path + (str(key_node.value),)
                lines[p] = key_node.start_mark.line + 1
                walk(value_node, p)

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _convert(value, tp, path: tuple, lines: dict):
    key = ".".join(path)
    line = lines.get(path)
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError("value must not be null", key, line)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, lines)
    origin = typing.get_origin(tp)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", key, line)
        (item_tp, *_) = typing.get_args(tp)
        items = [_convert(v, item_tp, path, lines) for v in value]
        return tuple(items) if origin is tuple else items
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {type(value).__name__}", key, line)
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {type(value).__name__}", key, line)
        return value
    if tp in (str, bool):
        if not isinstance(value, tp):
            raise ConfigError(f"expected {tp.__name__}, got {type(value).__name__}", key, line)
        return value
    raise ConfigError(f"unsupported field type {tp}", key, line)


def _build(cls, data, path: tuple, lines: dict):
    key = ".".join(path)
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", key or "<root>", lines.get(path))
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for k in data:
        if k not in known:
            p = path + (str(k),)
            raise ConfigError("unknown key", ".".join(p), lines.get(p))
    kwargs = {k: _convert(v, hints[k], path + (k,), lines) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), key or "<root>", lines.get(path)) from exc
    except InputError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), key or "<root>", lines.get(path)) from exc


def _apply_method(cfg: ExperimentConfig, raw: dict, lines: dict) -> ExperimentConfig:
    """Make the forget section agree with the chosen method."""
    given = raw.get("forget") or {}
    wanted = _METHOD_LOSS.get(cfg.method)
    if wanted is not None:
        if "loss_kind" in given and given["loss_kind"] != wanted:
            raise ConfigError(
                f"loss_kind {given['loss_kind']!r} conflicts with method {cfg.method!r}",
                "forget.loss_kind",
                lines.get(("forget", "loss_kind")),
            )
        cfg.forget.loss_kind = wanted
    if cfg.method == "all_params":
        if given.get("select_layers") is True:
            raise ConfigError("all_params disables layer selection", "forget.select_layers", lines.get(("forget", "select_layers")))
        cfg.forget.select_layers = False
    return cfg


def config_from_dict(data: dict, text: str | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    lines = _line_index(text) if text else {}
    if "schema_version" not in data:
        raise ConfigError("missing schema_version", "schema_version")
    cfg = _build(ExperimentConfig, data, (), lines)
    cfg = _apply_method(cfg, data, lines)
    if cfg.model.source == "checkpoint":
        path = Path(cfg.model.checkpoint)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}", "model.checkpoint", lines.get(("model", "checkpoint")))
        cfg.model.checkpoint = str(path.resolve())
    return cfg


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", "<root>", mark.line + 1 if mark else None) from exc
    if data is None:
        raise ConfigError("empty configuration", "<root>", 1)
    return config_from_dict(data, text, base_dir)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", "<file>")
    return parse_config_text(path.read_text(), path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
