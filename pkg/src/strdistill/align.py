"""Train-time projection heads mapping student features into teacher spaces."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeMismatch

EPS = 1e-8


def l2_normalize(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Row-wise ``x / (||x|| + eps)``; zero rows stay zero."""
    return x / (x.norm(dim=-1, keepdim=True) + eps)


class AdaptiveAlign(nn.Module):
    """Token-sequence projection ``norm(P @ f @ W1)``.

    ``P`` (teacher_tokens x student_tokens) re-mixes the sequence axis and
    ``W1`` (student_dim -> teacher_dim) the channel axis.
    """

    def __init__(self, student_tokens: int, student_dim: int, teacher_tokens: int, teacher_dim: int):
        super().__init__()
        self.P = nn.Parameter(torch.randn(teacher_tokens, student_tokens) * 0.02)
        self.W1 = nn.Linear(student_dim, teacher_dim, bias=False)
        nn.init.trunc_normal_(self.W1.weight, std=0.02)

    def project(self, f: torch.Tensor) -> torch.Tensor:
        """``P @ f @ W1`` before normalization."""
        n_f, d_f = self.P.shape[1], self.W1.in_features
        if tuple(f.shape[-2:]) != (n_f, d_f):
            raise ShapeMismatch(f"expected (..., {n_f}, {d_f}) student features, got {tuple(f.shape)}")
        return self.W1(torch.matmul(self.P, f))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.project(f))


class GlobalAlign(nn.Module):
    """Class-token projection ``norm(ReLU(cls @ W1) @ W2)``."""

    def __init__(self, student_dim: int, teacher_dim: int, hidden: int = 768):
        super().__init__()
        self.W1 = nn.Linear(student_dim, hidden, bias=False)
        self.W2 = nn.Linear(hidden, teacher_dim, bias=False)
        for lin in (self.W1, self.W2):
            nn.init.trunc_normal_(lin.weight, std=0.02)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        if cls.shape[-1] != self.W1.in_features:
            raise ShapeMismatch(f"expected class token of width {self.W1.in_features}, got {tuple(cls.shape)}")
        return l2_normalize(self.W2(torch.relu(self.W1(cls))))


def aam_project(f: torch.Tensor, head: AdaptiveAlign) -> torch.Tensor:
    return head(f)


def gam_project(cls: torch.Tensor, head: GlobalAlign) -> torch.Tensor:
    return head(cls)


class AlignHeads(nn.Module):
    """One projection head per distillation term.

    Encoder terms map onto teacher image stages; decoder terms onto teacher
    text stages; ``gam`` maps the last encoder class token onto the text
    class token.
    """

    def __init__(
        self,
        enc_tokens: int,
        enc_dim: int,
        dec_tokens: int,
        dec_dim: int,
        img_tokens: int,
        img_dim: int = 768,
        txt_tokens: int = 27,
        txt_dim: int = 512,
        gam_hidden: int = 768,
    ):
        super().__init__()
        self.enc = nn.ModuleList(AdaptiveAlign(enc_tokens, enc_dim, img_tokens, img_dim) for _ in range(3))
        self.gam = GlobalAlign(enc_dim, txt_dim, gam_hidden)
        self.dec = nn.ModuleList(AdaptiveAlign(dec_tokens, dec_dim, txt_tokens, txt_dim) for _ in range(3))

    @classmethod
    def for_models(cls, student_config, img_tokens: int, img_dim: int = 768, txt_dim: int = 512) -> "AlignHeads":
        return cls(
            enc_tokens=student_config.num_tokens,
            enc_dim=student_config.enc_width,
            dec_tokens=student_config.seq_len,
            dec_dim=student_config.dec_width,
            img_tokens=img_tokens,
            img_dim=img_dim,
            txt_tokens=student_config.seq_len,
            txt_dim=txt_dim,
        )
