"""Experiment configuration: JSON file + dotted ``key=value`` overrides.

Every section is a dataclass; loading rejects unknown keys and checks value
types against the dataclass annotations. The JSON key for the contrastive
weight is ``lambda`` (a Python keyword, so the attribute is ``lambda_``).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentationConfig, GeneratorParams
from .errors import ConfigError
from .losses import CONTRASTIVE_ARMS
from .model import DecoderConfig, EncoderConfig

MASKING_ARMS = ("none", "patch", "frame", "dual")
STAGES = ("pretrain", "finetune")

_RENAMES = {"lambda_": "lambda"}
_UNRENAMES = {v: k for k, v in _RENAMES.items()}


@dataclass
class TrainConfig:
    stage: str = "finetune"
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.0075
    momentum: float = 0.9
    weight_decay: float = 0.0
    lambda_: float = 0.1
    tau: float = 0.1
    alpha: float = 0.5
    beta_pct: float = 75.0
    contrastive_arm: str = "cscl"
    masking_arm: str = "dual"
    seed: int = 0
    augment: bool = True
    max_steps: int = 0
    init_checkpoint: str = ""
    checkpoint_out: str = ""

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.lambda_ < 0 or self.tau <= 0:
            raise ConfigError("lambda must be >= 0 and tau > 0")
        if self.contrastive_arm not in CONTRASTIVE_ARMS:
            raise ConfigError(f"contrastive_arm must be one of {CONTRASTIVE_ARMS}")
        if self.masking_arm not in MASKING_ARMS:
            raise ConfigError(f"masking_arm must be one of {MASKING_ARMS}")
        if self.stage == "pretrain" and self.masking_arm == "none":
            raise ConfigError("pretraining needs a masking_arm (patch, frame or dual)")
        if not 0.0 <= self.alpha < 1.0 or not 0.0 <= self.beta_pct <= 100.0:
            raise ConfigError("alpha must be in [0, 1) and beta_pct in [0, 100]")

    def mask_ratios(self) -> tuple[float, float]:
        """(alpha, beta_pct) actually used by the masking arm."""
        return {
            "dual": (self.alpha, self.beta_pct),
            "patch": (0.0, self.beta_pct),
            "frame": (self.alpha, 0.0),
            "none": (0.0, 0.0),
        }[self.masking_arm]


# Experiment defaults: the easy CPU benchmark (8 frames of 32x32, 200/40/60 clips).
BENCH_GEOMETRY = dict(T=8, H=32, W=32, C=1, patch_size=8)


@dataclass
class DataConfig:
    n_clips: int = 300
    seed: int = 0
    params: GeneratorParams = field(default_factory=lambda: GeneratorParams(**BENCH_GEOMETRY, split=(2 / 3, 2 / 15, 1 / 5)))


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(**BENCH_GEOMETRY))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


@dataclass
class EvalConfig:
    checkpoint: str = ""
    split: str = "test"


@dataclass
class ExperimentConfig:
    manifest: str = ""
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="pretrain", epochs=30, batch_size=16, augment=False)
    )
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.params.validate()
        self.model.encoder.validate()
        self.model.decoder.validate()
        self.augment.validate()
        self.pretrain.validate()
        self.finetune.validate()
        enc, gp = self.model.encoder, self.data.params
        if (enc.T, enc.H, enc.W, enc.C, enc.patch_size) != (gp.T, gp.H, gp.W, gp.C, gp.patch_size):
            raise ConfigError(
                "model.encoder geometry (T, H, W, C, patch_size) must match data.params "
                f"({enc.T}, {enc.H}, {enc.W}, {enc.C}, {enc.patch_size}) vs "
                f"({gp.T}, {gp.H}, {gp.W}, {gp.C}, {gp.patch_size})"
            )
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")


# ---------------------------------------------------------------------------
# dict <-> dataclass


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, list):
            v = list(v)
        out[_RENAMES.get(f.name, f.name)] = v
    return out


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where + ".")
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    raise ConfigError(f"{where}: unsupported type {tp}")


def from_dict(cls, d: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {_RENAMES.get(f.name, f.name): f.name for f in dataclasses.fields(cls)}
    unknown = sorted(k for k in d if k not in names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {names[k]: _coerce(v, hints[names[k]], prefix + k) for k, v in d.items()}
    return cls(**kwargs)


def schema_keys(cls=ExperimentConfig, prefix: str = "") -> list[str]:
    """All dotted keys accepted by the config schema."""
    keys = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        name = prefix + _RENAMES.get(f.name, f.name)
        if dataclasses.is_dataclass(hints[f.name]):
            keys.extend(schema_keys(hints[f.name], name + "."))
        else:
            keys.append(name)
    return keys


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise ConfigError(f"unknown config key: {prefix}{k}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    tree = copy.deepcopy(tree)
    for text in overrides:
        path, value = parse_override(text)
        node = tree
        for i, part in enumerate(path):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {'.'.join(path[: i + 1])}")
            if i == len(path) - 1:
                node[part] = value
            else:
                node = node[part]
    return tree


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    tree = to_dict(ExperimentConfig())
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(
                f"config file not found: {path}. Expected a JSON object with sections "
                "manifest, seeds, data, model, augment, pretrain, finetune, eval "
                "(see `mvcc <command> --help` or README)"
            )
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        tree = _merge(tree, user)
    tree = apply_overrides(tree, overrides or [])
    cfg = from_dict(ExperimentConfig, tree)
    cfg.validate()
    return cfg


def config_digest(obj) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
