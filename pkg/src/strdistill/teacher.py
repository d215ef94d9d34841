"""Frozen CLIP teacher emitting per-stage image and text features.

The two CLIP towers are split into 4 stages of 3 blocks each. Image stages are
the hidden states after blocks 3/6/9/12 for a 32x128 crop; text stages are the
hidden states after the same blocks for the character-split label. Both are
taken before CLIP's final layer-norm and projection.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .charset import DEFAULT_CODEC, LabelCodec, char_split
from .errors import BadImageShape, ConfigError, EmptyLabel, GridMismatch, LabelTooLong, TokenizerExpansion

logger = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

VARIANTS = {
    # name -> (open_clip architecture, patch size)
    "ViT-B/16": ("ViT-B-16-quickgelu", 16),
    "ViT-B/32": ("ViT-B-32-quickgelu", 32),
}
NUM_STAGES = 4


def patch_grid(variant: str, image_size: tuple[int, int] = (32, 128)) -> tuple[int, int]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown CLIP variant {variant!r}; expected one of {sorted(VARIANTS)}", key="teacher.variant")
    patch = VARIANTS[variant][1]
    h, w = image_size
    if h % patch or w % patch:
        raise GridMismatch(f"image size {image_size} not divisible by patch {patch}")
    return h // patch, w // patch


@dataclass
class TeacherConfig:
    variant: str = "ViT-B/16"
    image_size: tuple[int, int] = (32, 128)
    weights_path: str | None = None
    cache_dir: str | None = None
    # used only when weights_path is unset: seeded random-init towers
    surrogate_seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        patch_grid(self.variant, self.image_size)


@dataclass
class TeacherFeatures:
    """Per-stage teacher features, batched (leading B) or for a single sample."""

    image_stages: list[torch.Tensor]
    text_stages: list[torch.Tensor]
    text_mask: torch.Tensor
    text_cls: torch.Tensor
    image_cls: torch.Tensor

    @property
    def batched(self) -> bool:
        return self.text_mask.dim() == 2

    def __len__(self) -> int:
        return self.text_mask.shape[0] if self.batched else 1

    def sample(self, i: int) -> "TeacherFeatures":
        return TeacherFeatures(
            image_stages=[s[i] for s in self.image_stages],
            text_stages=[s[i] for s in self.text_stages],
            text_mask=self.text_mask[i],
            text_cls=self.text_cls[i],
            image_cls=self.image_cls[i],
        )

    @classmethod
    def stack(cls, items: Sequence["TeacherFeatures"]) -> "TeacherFeatures":
        return cls(
            image_stages=[torch.stack([it.image_stages[k] for it in items]) for k in range(NUM_STAGES)],
            text_stages=[torch.stack([it.text_stages[k] for it in items]) for k in range(NUM_STAGES)],
            text_mask=torch.stack([it.text_mask for it in items]),
            text_cls=torch.stack([it.text_cls for it in items]),
            image_cls=torch.stack([it.image_cls for it in items]),
        )

    def to(self, device=None, dtype: torch.dtype | None = None) -> "TeacherFeatures":
        """Move features; ``dtype`` applies to the float tensors only."""
        return TeacherFeatures(
            image_stages=[s.to(device=device, dtype=dtype) for s in self.image_stages],
            text_stages=[s.to(device=device, dtype=dtype) for s in self.text_stages],
            text_mask=self.text_mask.to(device=device),
            text_cls=self.text_cls.to(device=device, dtype=dtype),
            image_cls=self.image_cls.to(device=device, dtype=dtype),
        )

    def detach(self) -> "TeacherFeatures":
        return TeacherFeatures(
            image_stages=[s.detach() for s in self.image_stages],
            text_stages=[s.detach() for s in self.text_stages],
            text_mask=self.text_mask,
            text_cls=self.text_cls.detach(),
            image_cls=self.image_cls.detach(),
        )


def resize_positional_embeddings(
    table: torch.Tensor,
    target_grid: tuple[int, int],
    variant: str | None = None,
    image_size: tuple[int, int] = (32, 128),
) -> torch.Tensor:
    """Shrink a square ViT positional table to a ``rows x cols`` patch grid.

    Args:
        table: ``(1 + g*g, D)`` table, class-token row first.
        target_grid: ``(rows, cols)`` of the new patch grid.
        variant: if given, ``target_grid`` must match that variant's grid for
            ``image_size``.

    Returns:
        ``(1 + rows*cols, D)`` table. The class row is copied; patch rows are
        bilinearly resampled.
    """
    rows, cols = target_grid
    if variant is not None and (rows, cols) != patch_grid(variant, image_size):
        raise GridMismatch(f"grid {target_grid} does not fit {variant} at {image_size}")
    n, dim = table.shape
    side = math.isqrt(n - 1)
    if side * side != n - 1:
        raise GridMismatch(f"positional table with {n - 1} patch rows is not a square grid")
    if (rows, cols) == (side, side):
        return table.clone()
    cls_row, patches = table[:1], table[1:]
    grid = patches.reshape(1, side, side, dim).permute(0, 3, 1, 2)
    grid = F.interpolate(grid.float(), size=(rows, cols), mode="bilinear", align_corners=False)
    patches = grid.permute(0, 2, 3, 1).reshape(rows * cols, dim).to(table.dtype)
    return torch.cat([cls_row, patches], dim=0)


def _read_state_dict(path: Path) -> dict[str, torch.Tensor]:
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file

        return load_file(str(path))
    try:
        archive = torch.jit.load(str(path), map_location="cpu")
        state = archive.state_dict()
    except RuntimeError:
        state = torch.load(str(path), map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items()}
    for k in ("input_resolution", "context_length", "vocab_size"):
        state.pop(k, None)
    return state


def clip_normalize(images: torch.Tensor) -> torch.Tensor:
    """Map ``[0, 1]`` NCHW images to CLIP's pretraining channel statistics."""
    mean = images.new_tensor(CLIP_MEAN).view(1, 3, 1, 1)
    std = images.new_tensor(CLIP_STD).view(1, 3, 1, 1)
    return (images - mean) / std


class ClipTeacher:
    """Frozen CLIP image + text towers with 4-stage feature taps."""

    def __init__(self, config: TeacherConfig | None = None, codec: LabelCodec = DEFAULT_CODEC, device="cpu"):
        import open_clip

        self.config = config or TeacherConfig()
        self.codec = codec
        self.device = torch.device(device)
        self.grid = patch_grid(self.config.variant, self.config.image_size)
        self.n_ctx = codec.seq_len
        arch = VARIANTS[self.config.variant][0]

        torch_state = torch.random.get_rng_state()
        torch.manual_seed(self.config.surrogate_seed)
        try:
            model = open_clip.create_model(arch, pretrained=None, force_image_size=self.config.image_size)
        finally:
            torch.random.set_rng_state(torch_state)

        if self.config.weights_path:
            self._load_weights(model, Path(self.config.weights_path))
            self.pretrained = True
        else:
            logger.warning(
                "no CLIP weights configured; using a seeded random-init %s teacher", self.config.variant
            )
            self.pretrained = False

        if self.n_ctx > model.positional_embedding.shape[0]:
            raise ConfigError(f"max_label_len too large for CLIP context", key="max_label_len")

        model.eval().requires_grad_(False)
        self.model = model.to(self.device)
        self.tokenizer = open_clip.tokenizer.SimpleTokenizer()
        self._check_alphabet()
        self._checksum: str | None = None

    def _load_weights(self, model, path: Path) -> None:
        if not path.exists():
            raise ConfigError(f"CLIP weights not found at {path}", key="teacher.weights_path")
        state = _read_state_dict(path)
        key = "visual.positional_embedding"
        if key in state and state[key].shape != model.visual.positional_embedding.shape:
            state[key] = resize_positional_embeddings(state[key], self.grid, self.config.variant, self.config.image_size)
        model.load_state_dict(state, strict=True)

    def _check_alphabet(self) -> None:
        for ch in self.codec.alphabet:
            if len(self.tokenizer.encode(ch)) != 1:
                raise TokenizerExpansion(f"character {ch!r} maps to more than one CLIP token")

    # ------------------------------------------------------------------ params
    def parameters(self):
        return self.model.parameters()

    def checksum(self) -> str:
        """SHA-256 over every teacher tensor, in name order."""
        h = hashlib.sha256()
        for name, tensor in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @property
    def fingerprint(self) -> str:
        if self._checksum is None:
            self._checksum = self.checksum()
        tag = self.config.variant.replace("/", "")
        return f"{tag}-{self._checksum[:16]}"

    # ------------------------------------------------------------------ image
    @torch.no_grad()
    def encode_image_stages(self, images: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Hidden states after image blocks 3/6/9/12 for CLIP-normalized NCHW images."""
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        h, w = self.config.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, h, w):
            raise BadImageShape(f"expected (B, 3, {h}, {w}) images, got {tuple(images.shape)}")
        visual = self.model.visual
        x = visual.conv1(images.to(self.device, visual.conv1.weight.dtype))
        x = x.flatten(2).transpose(1, 2)
        cls = visual.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + visual.positional_embedding.to(x.dtype)
        x = visual.ln_pre(x)
        stages = self._run_blocks(visual.transformer, x, attn_mask=None)
        if single:
            stages = [s[0] for s in stages]
        return stages, stages[-1][..., 0, :]

    @torch.no_grad()
    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        """CLIP's projected, unit-norm image embedding (ln_post + proj of the class token)."""
        _, cls = self.encode_image_stages(images)
        visual = self.model.visual
        return F.normalize(visual.ln_post(cls) @ visual.proj, dim=-1)

    # ------------------------------------------------------------------ text
    def tokenize(self, labels: Sequence[str], char_level: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """CLIP token ids ``(B, n_ctx)`` for labels plus the validity mask."""
        tok = self.tokenizer
        ids = torch.zeros(len(labels), self.n_ctx, dtype=torch.long)
        mask = torch.zeros(len(labels), self.n_ctx, dtype=torch.bool)
        for b, label in enumerate(labels):
            if not label:
                raise EmptyLabel("teacher text input is empty")
            if len(label) > self.codec.max_label_len:
                raise LabelTooLong(f"label {label!r} exceeds {self.codec.max_label_len} chars")
            body = tok.encode(char_split(label) if char_level else label)
            if char_level and len(body) != len(label):
                raise TokenizerExpansion(f"{label!r} tokenized to {len(body)} tokens, expected {len(label)}")
            seq = [tok.sot_token_id, *body, tok.eot_token_id][: self.n_ctx]
            ids[b, : len(seq)] = torch.tensor(seq)
            mask[b, : len(seq)] = True
        return ids, mask

    @torch.no_grad()
    def encode_text_stages(
        self, labels: str | Sequence[str], char_level: bool = True
    ) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor]:
        """Hidden states after text blocks 3/6/9/12 for char-split labels.

        Returns ``(stages, mask, cls)`` where each stage is ``(B, n_ctx, 512)``,
        ``mask`` marks start-of-text through end-of-text and ``cls`` is the
        stage-4 end-of-text row.
        """
        single = isinstance(labels, str)
        if single:
            labels = [labels]
        ids, mask = self.tokenize(labels, char_level=char_level)
        ids, mask = ids.to(self.device), mask.to(self.device)
        m = self.model
        n = self.n_ctx
        x = m.token_embedding(ids) + m.positional_embedding[:n]
        attn_mask = m.attn_mask[:n, :n] if m.attn_mask is not None else None
        stages = self._run_blocks(m.transformer, x, attn_mask=attn_mask)
        eot = mask.sum(dim=1) - 1
        cls = stages[-1][torch.arange(len(labels), device=self.device), eot]
        if single:
            return [s[0] for s in stages], mask[0], cls[0]
        return stages, mask, cls

    @torch.no_grad()
    def embed_text(self, labels: Sequence[str], char_level: bool = True) -> torch.Tensor:
        """CLIP's projected, unit-norm text embedding at the end-of-text token."""
        stages, mask, _ = self.encode_text_stages(list(labels), char_level=char_level)
        x = self.model.ln_final(stages[-1])
        eot = mask.sum(dim=1) - 1
        x = x[torch.arange(len(labels), device=x.device), eot]
        return F.normalize(x @ self.model.text_projection, dim=-1)

    # ------------------------------------------------------------------ both
    @torch.no_grad()
    def features(self, images: torch.Tensor, labels: Sequence[str]) -> TeacherFeatures:
        img_stages, img_cls = self.encode_image_stages(images)
        txt_stages, mask, txt_cls = self.encode_text_stages(list(labels))
        return TeacherFeatures(img_stages, txt_stages, mask, txt_cls, img_cls)

    @staticmethod
    def _run_blocks(transformer, x: torch.Tensor, attn_mask) -> list[torch.Tensor]:
        blocks = transformer.resblocks
        per_stage = len(blocks) // NUM_STAGES
        if not transformer.batch_first:
            x = x.transpose(0, 1)
        stages = []
        for i, block in enumerate(blocks, start=1):
            x = block(x, attn_mask=attn_mask)
            if i % per_stage == 0:
                stages.append(x if transformer.batch_first else x.transpose(0, 1))
        return stages
