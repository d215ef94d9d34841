"""Checkpoint files.

A checkpoint is a safetensors file: named little-endian tensors plus string
metadata. Recognizer weights live under ``student/``; alignment heads under
``distill/`` so inference can drop them. Metadata carries the format version,
the student config, the charset declaration and the training config.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .charset import LabelCodec
from .errors import BadCheckpoint
from .student import Recognizer, StudentConfig

FORMAT = "strdistill-checkpoint"
VERSION = "1"
STUDENT_NS = "student/"
DISTILL_NS = "distill/"


def save_checkpoint(
    path: str | os.PathLike,
    student: Recognizer,
    heads: torch.nn.Module | None = None,
    train_config: dict | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {STUDENT_NS + k: v.detach().cpu().contiguous() for k, v in student.state_dict().items()}
    if heads is not None:
        tensors.update({DISTILL_NS + k: v.detach().cpu().contiguous() for k, v in heads.state_dict().items()})
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "student_config": json.dumps(student.config.to_dict()),
        "charset": json.dumps(student.codec.describe()),
        "train_config": json.dumps(train_config or {}, sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata=meta)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise BadCheckpoint(f"checkpoint {path} does not exist")
    try:
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as fh:
            meta = dict(fh.metadata() or {})
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise BadCheckpoint(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("format") != FORMAT:
        raise BadCheckpoint(f"{path} is not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise BadCheckpoint(f"unsupported checkpoint version {meta.get('version')!r}")
    return tensors, {k: json.loads(v) for k, v in meta.items() if k not in ("format", "version")}


def load_student(path: str | os.PathLike, device="cpu") -> tuple[Recognizer, dict]:
    """Build the recognizer from a checkpoint; ``distill/`` tensors are ignored."""
    tensors, meta = read_checkpoint(path)
    try:
        cfg = StudentConfig(**meta["student_config"])
        cs = meta["charset"]
        codec = LabelCodec(alphabet=cs["alphabet"], max_label_len=cs["max_label_len"])
        model = Recognizer(cfg, codec)
        state = {k[len(STUDENT_NS):]: v for k, v in tensors.items() if k.startswith(STUDENT_NS)}
        model.load_state_dict(state, strict=True)
    except (KeyError, TypeError, RuntimeError) as exc:
        raise BadCheckpoint(f"checkpoint {path} is inconsistent: {exc}") from None
    return model.to(device).eval(), meta


def load_heads_state(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    tensors, _ = read_checkpoint(path)
    return {k[len(DISTILL_NS):]: v for k, v in tensors.items() if k.startswith(DISTILL_NS)}


def strip_distill(src: str | os.PathLike, dst: str | os.PathLike) -> Path:
    """Write a copy of ``src`` without the ``distill/`` namespace."""
    tensors, meta = read_checkpoint(src)
    kept = {k: v for k, v in tensors.items() if not k.startswith(DISTILL_NS)}
    raw_meta = {"format": FORMAT, "version": VERSION, **{k: json.dumps(v, sort_keys=True) for k, v in meta.items()}}
    dst = Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    save_file(kept, str(dst), metadata=raw_meta)
    return dst
