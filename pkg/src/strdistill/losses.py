"""Distillation and recognition objectives.

Every feature loss accepts ``(N, D)`` or batched ``(B, N, D)`` inputs plus an
optional row mask. Masked rows are dropped before normalizing by ``N``, and
per-sample values are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .align import AlignHeads, l2_normalize
from .errors import ConfigError, MissingStage, NonPositiveTau, ShapeMismatch

BASE_LOSSES = ("lcl", "l1", "cos", "kl")
GAM_LOSSES = ("lcl-batch", "l1")


def _prep(f: torch.Tensor, t: torch.Tensor, mask: torch.Tensor | None):
    if f.shape != t.shape:
        raise ShapeMismatch(f"student {tuple(f.shape)} vs teacher {tuple(t.shape)}")
    if f.dim() == 2:
        f, t = f.unsqueeze(0), t.unsqueeze(0)
        if mask is not None:
            mask = mask.unsqueeze(0)
    elif f.dim() != 3:
        raise ShapeMismatch(f"expected (N, D) or (B, N, D), got {tuple(f.shape)}")
    if mask is None:
        mask = torch.ones(f.shape[:2], dtype=torch.bool, device=f.device)
    elif tuple(mask.shape) != tuple(f.shape[:2]):
        raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match features {tuple(f.shape)}")
    mask = mask.to(torch.bool)
    return f, t, mask, mask.sum(dim=1).to(f.dtype)


def loss_l1(f, t, mask=None):
    """Mean absolute difference, ``||f - F||_1 / (N * D)``."""
    f, t, m, n = _prep(f, t, mask)
    per = ((f - t).abs().sum(-1) * m).sum(-1) / (n * f.shape[-1])
    return per.mean()


def loss_intra(f, t, mask=None):
    """``||f f^T - F F^T||_1 / N^2``: match the token self-similarity maps."""
    f, t, m, n = _prep(f, t, mask)
    gram_f = f @ f.transpose(1, 2)
    gram_t = t @ t.transpose(1, 2)
    pair = m[:, :, None] & m[:, None, :]
    per = ((gram_f - gram_t).abs() * pair).sum((1, 2)) / n**2
    return per.mean()


def loss_inter(f, t, tau: float = 0.03, mask=None):
    """Contrastive CE over ``f F^T / tau`` with the identity as target.

    Row ``i`` of the student should pick teacher row ``i`` among all valid
    teacher rows.
    """
    if tau <= 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}", key="loss.tau")
    f, t, m, n = _prep(f, t, mask)
    logits = (f @ t.transpose(1, 2)) / tau
    logits = logits.masked_fill(~m[:, None, :], float("-inf"))
    logp = torch.log_softmax(logits, dim=-1).diagonal(dim1=1, dim2=2)
    per = -torch.where(m, logp, torch.zeros_like(logp)).sum(-1) / n
    return per.mean()


def loss_lcl(f, t, lambda1: float = 5.0, lambda2: float = 0.1, tau: float = 0.03, mask=None):
    return lambda1 * loss_intra(f, t, mask) + lambda2 * loss_inter(f, t, tau, mask)


def loss_cos(f, t, mask=None):
    """Mean over rows of ``1 - cos(f_i, F_i)``."""
    f, t, m, n = _prep(f, t, mask)
    denom = (f.norm(dim=-1) * t.norm(dim=-1)).clamp_min(1e-8)
    per = ((1 - (f * t).sum(-1) / denom) * m).sum(-1) / n
    return per.mean()


def loss_kl(f, t, mask=None):
    """Mean over rows of ``KL(softmax(F_i) || softmax(f_i))``; the teacher is the reference."""
    f, t, m, n = _prep(f, t, mask)
    log_p = torch.log_softmax(t, dim=-1)
    log_q = torch.log_softmax(f, dim=-1)
    per = ((log_p.exp() * (log_p - log_q)).sum(-1) * m).sum(-1) / n
    return per.mean()


@dataclass
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 0.1
    tau: float = 0.03
    base_loss: str = "lcl"
    # one flag per distillation term, in SDS_PAIRS order
    stage_mask: tuple[bool, ...] = (True,) * 7
    gam_loss: str = "lcl-batch"

    def __post_init__(self):
        self.stage_mask = tuple(bool(x) for x in self.stage_mask)
        if len(self.stage_mask) != 7:
            raise ConfigError("needs exactly 7 entries", key="loss.stage_mask")
        if self.tau <= 0:
            raise NonPositiveTau(f"tau must be positive, got {self.tau}", key="loss.tau")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda weights must be non-negative", key="loss.lambda1")
        if self.base_loss not in BASE_LOSSES:
            raise ConfigError(f"expected one of {BASE_LOSSES}", key="loss.base_loss")
        if self.gam_loss not in GAM_LOSSES:
            raise ConfigError(f"expected one of {GAM_LOSSES}", key="loss.gam_loss")

    @property
    def active(self) -> bool:
        return any(self.stage_mask)

    def to_dict(self) -> dict:
        return asdict(self)


def base_loss(f, t, weights: LossWeights, mask=None):
    if weights.base_loss == "lcl":
        return loss_lcl(f, t, weights.lambda1, weights.lambda2, weights.tau, mask)
    if weights.base_loss == "l1":
        return loss_l1(f, t, mask)
    if weights.base_loss == "cos":
        return loss_cos(f, t, mask)
    return loss_kl(f, t, mask)


@dataclass(frozen=True)
class Pair:
    """One distillation term: a student stage matched with a teacher stage."""

    name: str
    student: str  # "enc" | "dec"
    student_stage: int  # 1-based
    teacher: str  # "image" | "text"
    teacher_stage: int  # 1-based
    head: str  # "aam" | "gam"


# encoder stages follow the image tower forward; decoder stages follow the
# text tower backwards (decoder stage i <-> text stage 4 - i)
SDS_PAIRS: tuple[Pair, ...] = (
    *(Pair(f"enc{i}", "enc", i, "image", i, "aam") for i in (1, 2, 3)),
    Pair("gam", "enc", 4, "text", 4, "gam"),
    *(Pair(f"dec{i}", "dec", i, "text", 4 - i, "aam") for i in (1, 2, 3)),
)
TERM_NAMES = tuple(p.name for p in SDS_PAIRS)


def term_loss(pair: Pair, student, teacher, heads: AlignHeads, weights: LossWeights) -> torch.Tensor:
    if pair.head == "gam":
        f = heads.gam(student.enc_cls[pair.student_stage - 1])
        t = l2_normalize(teacher.text_cls)
        if f.dim() == 1:
            f, t = f[None], t[None]
        # the (B, D) class tokens form one sequence of length B
        if weights.base_loss == "lcl" and weights.gam_loss == "l1":
            return loss_l1(f, t)
        return base_loss(f, t, weights)

    if pair.student == "enc":
        f = heads.enc[pair.student_stage - 1](student.enc_stages[pair.student_stage - 1])
    else:
        f = heads.dec[pair.student_stage - 1](student.dec_stages[pair.student_stage - 1])
    if pair.teacher == "image":
        t, mask = teacher.image_stages[pair.teacher_stage - 1], None
    else:
        t, mask = teacher.text_stages[pair.teacher_stage - 1], teacher.text_mask
    return base_loss(f, l2_normalize(t), weights, mask)


def loss_sds(student, teacher, heads: AlignHeads, weights: LossWeights):
    """Layer-wise distillation loss summed over the active terms.

    Returns ``(total, terms)`` where ``terms`` maps each active term name to
    its value.
    """
    for name, stages in (
        ("enc_stages", student.enc_stages),
        ("dec_stages", student.dec_stages),
        ("image_stages", teacher.image_stages),
        ("text_stages", teacher.text_stages),
    ):
        if len(stages) < 4:
            raise MissingStage(f"{name} has {len(stages)} stages, need 4")
    teacher = teacher.detach()
    terms: dict[str, torch.Tensor] = {}
    for pair, on in zip(SDS_PAIRS, weights.stage_mask):
        if on:
            terms[pair.name] = term_loss(pair, student, teacher, heads, weights)
    if not terms:
        ref = student.logits if student.logits is not None else student.enc_stages[0]
        return ref.new_zeros(()), terms
    return torch.stack(list(terms.values())).sum(), terms


def loss_recognition(logits: torch.Tensor, target_ids: torch.Tensor, pad_id: int = 38) -> torch.Tensor:
    """Character cross-entropy; ``logits[:, t]`` is scored against ``target_ids[:, t + 1]``."""
    pred = logits[:, :-1].reshape(-1, logits.shape[-1])
    gold = target_ids[:, 1:].reshape(-1)
    return F.cross_entropy(pred, gold, ignore_index=pad_id)


def loss_total(logits, target_ids, l_dis, pad_id: int = 38):
    return loss_recognition(logits, target_ids, pad_id) + l_dis
