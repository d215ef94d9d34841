"""ViT encoder + autoregressive transformer decoder recognizer.

The encoder's blocks are grouped into 4 equal stages and the decoder has one
layer per stage; every stage output is exposed for distillation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .charset import DEFAULT_CODEC, LabelCodec
from .errors import BadImageShape, BadTargetLength, ConfigError

NUM_STAGES = 4


@dataclass
class StudentConfig:
    image_size: tuple[int, int] = (32, 128)
    patch_size: tuple[int, int] = (4, 8)
    enc_depth: int = 12
    enc_width: int = 384
    enc_heads: int = 6
    dec_depth: int = 4
    dec_width: int = 384
    dec_heads: int = 6
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    vocab_size: int = 39
    max_label_len: int = 25

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.patch_size = tuple(self.patch_size)
        if self.enc_depth % NUM_STAGES:
            raise ConfigError(f"must be divisible by {NUM_STAGES}", key="student.enc_depth")
        if self.dec_depth != NUM_STAGES:
            raise ConfigError(f"must equal the number of stages ({NUM_STAGES})", key="student.dec_depth")
        for key, width, heads in (("enc", self.enc_width, self.enc_heads), ("dec", self.dec_width, self.dec_heads)):
            if width % heads:
                raise ConfigError(f"width {width} not divisible by heads {heads}", key=f"student.{key}_heads")
        (h, w), (ph, pw) = self.image_size, self.patch_size
        if h % ph or w % pw:
            raise ConfigError(f"patch {self.patch_size} does not tile {self.image_size}", key="student.patch_size")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size[0], self.image_size[1] // self.patch_size[1]

    @property
    def num_tokens(self) -> int:
        rows, cols = self.grid
        return rows * cols + 1

    @property
    def seq_len(self) -> int:
        return self.max_label_len + 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudentStages:
    enc_stages: list[torch.Tensor]
    enc_cls: list[torch.Tensor]
    dec_stages: list[torch.Tensor]
    logits: torch.Tensor


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x, context=None, causal: bool = False):
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(
            q, k, v, is_causal=causal, dropout_p=self.dropout if self.training else 0.0
        )
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float, dropout: float):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim), nn.Dropout(dropout))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, dropout)

    def forward(self, x, memory):
        x = x + self.self_attn(self.norm1(x), causal=True)
        x = x + self.cross_attn(self.norm2(x), context=memory)
        return x + self.mlp(self.norm3(x))


class Recognizer(nn.Module):
    """Scene-text recognizer with stage taps on encoder and decoder."""

    def __init__(self, config: StudentConfig | None = None, codec: LabelCodec = DEFAULT_CODEC):
        super().__init__()
        cfg = self.config = config or StudentConfig()
        if cfg.vocab_size != codec.vocab_size or cfg.max_label_len != codec.max_label_len:
            raise ConfigError("student vocab/max_label_len disagree with the charset", key="student.vocab_size")
        self.codec = codec

        self.patch_embed = nn.Conv2d(3, cfg.enc_width, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.enc_width))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.enc_width))
        self.pos_drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.enc_width, cfg.enc_heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.enc_depth)
        )
        self.enc_norm = nn.LayerNorm(cfg.enc_width)
        self.mem_proj = nn.Linear(cfg.enc_width, cfg.dec_width) if cfg.enc_width != cfg.dec_width else nn.Identity()

        self.char_embed = nn.Embedding(cfg.vocab_size, cfg.dec_width)
        self.dec_pos = nn.Parameter(torch.zeros(1, cfg.seq_len, cfg.dec_width))
        self.dec_drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.dec_width, cfg.dec_heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.dec_depth)
        )
        self.dec_norm = nn.LayerNorm(cfg.dec_width)
        self.head = nn.Linear(cfg.dec_width, cfg.vocab_size)
        self._init_weights()

    def _init_weights(self):
        for p in (self.cls_token, self.pos_embed, self.dec_pos):
            nn.init.trunc_normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.trunc_normal_(m.weight, std=0.02)

    # ---------------------------------------------------------------- encoder
    def encode(self, images: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Run the encoder on normalized NCHW images.

        Returns the 4 stage outputs ``(B, num_tokens, enc_width)`` and their
        class-token rows.
        """
        h, w = self.config.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, h, w):
            raise BadImageShape(f"expected (B, 3, {h}, {w}) images, got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = self.pos_drop(x + self.pos_embed)
        per_stage = len(self.blocks) // NUM_STAGES
        stages = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i % per_stage == 0:
                stages.append(x)
        return stages, [s[:, 0] for s in stages]

    def memory(self, enc_stages: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.mem_proj(self.enc_norm(enc_stages[-1]))

    # ---------------------------------------------------------------- decoder
    def _decode(self, memory: torch.Tensor, ids: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        n = ids.shape[1]
        x = self.dec_drop(self.char_embed(ids) + self.dec_pos[:, :n])
        stages = []
        for layer in self.layers:
            x = layer(x, memory)
            stages.append(x)
        return stages, self.head(self.dec_norm(x))

    def decode_teacher_forced(self, memory: torch.Tensor, target_ids: torch.Tensor):
        """Causal decode over the full target; ``logits[:, t]`` predicts ``target_ids[:, t + 1]``."""
        if target_ids.dim() != 2 or target_ids.shape[1] != self.config.seq_len:
            raise BadTargetLength(f"targets must be (B, {self.config.seq_len}), got {tuple(target_ids.shape)}")
        return self._decode(memory, target_ids)

    @torch.no_grad()
    def greedy_decode(self, memory: torch.Tensor) -> tuple[torch.Tensor, list[str]]:
        """Argmax decoding from BOS until EOS or ``max_label_len`` characters.

        BOS and PAD are never emitted. Returns the emitted ids (after BOS,
        PAD-filled once a row has finished) and the decoded strings.
        """
        codec = self.codec
        b = memory.shape[0]
        ids = torch.full((b, 1), codec.bos, dtype=torch.long, device=memory.device)
        done = torch.zeros(b, dtype=torch.bool, device=memory.device)
        banned = torch.tensor([codec.bos, codec.pad], device=memory.device)
        for _ in range(self.config.max_label_len):
            _, logits = self._decode(memory, ids)
            step = logits[:, -1].clone()
            step[:, banned] = float("-inf")
            nxt = step.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, codec.pad), nxt)
            ids = torch.cat([ids, nxt[:, None]], dim=1)
            done |= nxt == codec.eos
            if bool(done.all()):
                break
        emitted = ids[:, 1:]
        return emitted, [codec.decode(row.tolist()) for row in emitted]

    # ---------------------------------------------------------------- full
    def forward(self, images: torch.Tensor, target_ids: torch.Tensor) -> StudentStages:
        enc_stages, enc_cls = self.encode(images)
        dec_stages, logits = self.decode_teacher_forced(self.memory(enc_stages), target_ids)
        return StudentStages(enc_stages, enc_cls, dec_stages, logits)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> list[str]:
        enc_stages, _ = self.encode(images)
        return self.greedy_decode(self.memory(enc_stages))[1]


def student_normalize(images: torch.Tensor) -> torch.Tensor:
    """Map ``[0, 1]`` images to ``[-1, 1]``."""
    return (images - 0.5) / 0.5
