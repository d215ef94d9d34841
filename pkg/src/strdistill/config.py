"""Training configuration, presets and YAML/override merging.

A config file is a YAML mapping. Top-level keys are ``TrainConfig`` fields;
the nested sections ``loss``, ``teacher`` and ``student`` hold the fields of
``LossWeights``, ``TeacherConfig`` and ``StudentConfig``. Overrides use dotted
keys (``student.enc_depth``) and win over file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .student import StudentConfig
from .teacher import TeacherConfig

SECTIONS = {"loss": LossWeights, "teacher": TeacherConfig, "student": StudentConfig}


@dataclass
class TrainConfig:
    preset: str = "desk"
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 10
    warmup_frac: float = 0.02
    grad_clip: float = 5.0
    seed: int = 7
    # training data; a synthetic corpus is rendered into workdir when unset
    data_root: str | None = None
    val_root: str | None = None
    val_fraction: float = 0.1
    synth_count: int = 2000
    synth_seed: int = 7
    workdir: str = "runs"
    checkpoint_dir: str = "runs/checkpoints"
    use_cache: bool = True
    clean_teacher_input: bool = False
    augment: bool = True
    max_steps: int | None = None
    device: str = "cpu"
    loss: LossWeights = field(default_factory=LossWeights)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"expected one of {sorted(PRESETS)}", key="preset")
        for key in ("lr", "batch_size", "epochs"):
            if getattr(self, key) <= 0:
                raise ConfigError("must be positive", key=key)
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("must be in [0, 1)", key="val_fraction")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (paths excluded)."""
        d = self.to_dict()
        for k in ("workdir", "checkpoint_dir", "device"):
            d.pop(k)
        d["teacher"].pop("cache_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:12]


PRESETS: dict[str, dict[str, Any]] = {
    "paper": {
        "lr": 1.4e-3,
        "batch_size": 320,
        "epochs": 5,
        "clean_teacher_input": False,
    },
    # CPU-sized: small student, teacher sees the clean image so its
    # features can be cached once per corpus
    "desk": {
        "lr": 3e-4,
        "batch_size": 32,
        "epochs": 10,
        "clean_teacher_input": True,
        "student.enc_depth": 4,
        "student.enc_width": 128,
        "student.enc_heads": 4,
        "student.dec_width": 128,
        "student.dec_heads": 4,
        "student.dropout": 0.0,
    },
}


def _coerce(value: Any, annotation, key: str):
    """Convert a raw YAML/CLI value to the annotated field type."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    try:
        if annotation is bool:
            if isinstance(value, str):
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if origin is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            elem = args[0] if args else str
            return tuple(_coerce(v, elem, key) for v in value)
        if annotation in (int, float, str):
            if annotation is int and isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return annotation(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot interpret {value!r} as {getattr(annotation, '__name__', annotation)}", key=key) from None
    return value


def field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


def all_keys() -> dict[str, Any]:
    """Every settable dotted key with its type."""
    keys = {k: t for k, t in field_types(TrainConfig).items() if k not in SECTIONS}
    for section, cls in SECTIONS.items():
        for k, t in field_types(cls).items():
            keys[f"{section}.{k}"] = t
    return keys


def _flatten(raw: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in raw.items():
        if isinstance(v, dict) and not prefix and k in SECTIONS:
            out.update(_flatten(v, f"{k}."))
        else:
            out[prefix + k] = v
    return out


def load_config_file(path: str | os.PathLike) -> dict[str, Any]:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config: {exc}", key=str(path)) from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must be a mapping", key=str(path))
    return _flatten(raw)


def build_config(file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Preset defaults <- config file <- overrides, all as dotted keys."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset = overrides.get("preset", file_values.get("preset", "desk"))
    if preset not in PRESETS:
        raise ConfigError(f"expected one of {sorted(PRESETS)}", key="preset")
    merged = {"preset": preset, **PRESETS[preset], **file_values, **overrides}
    types_ = all_keys()
    flat: dict[str, Any] = {}
    for key, value in merged.items():
        if key not in types_:
            raise ConfigError("unknown configuration key", key=key)
        flat[key] = _coerce(value, types_[key], key)
    top = {k: v for k, v in flat.items() if "." not in k}
    for section, cls in SECTIONS.items():
        sub = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(section + ".")}
        top[section] = cls(**sub)
    return TrainConfig(**top)


def config_from_dict(d: dict) -> TrainConfig:
    """Inverse of ``TrainConfig.to_dict``."""
    d = dict(d)
    for section, cls in SECTIONS.items():
        if section in d:
            d[section] = cls(**d[section])
    return TrainConfig(**d)


def dump_config(config: TrainConfig, path: str | os.PathLike) -> None:
    d = config.to_dict()
    for section in SECTIONS:
        d[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[section].items()}
    Path(path).write_text(yaml.safe_dump(d, sort_keys=False))
