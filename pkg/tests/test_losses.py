import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from strdistill.align import AlignHeads, l2_normalize
from strdistill.errors import MissingStage, NonPositiveTau, ShapeMismatch
from strdistill.losses import (
    SDS_PAIRS,
    LossWeights,
    loss_cos,
    loss_inter,
    loss_intra,
    loss_kl,
    loss_l1,
    loss_lcl,
    loss_recognition,
    loss_sds,
    loss_total,
    term_loss,
)
from strdistill.student import StudentStages
from strdistill.teacher import TeacherFeatures

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# ------------------------------------------------------------------ closed form
def test_l1_examples():
    assert loss_l1(torch.zeros(3, 4, dtype=D), torch.ones(3, 4, dtype=D)).item() == 1.0
    x = torch.randn(5, 3, dtype=D)
    assert loss_l1(x, x).item() == 0.0
    assert loss_l1(t([[1.0, 0.0]]), t([[0.0, 1.0]])).item() == 1.0


def test_intra_examples():
    x = l2_normalize(torch.randn(4, 6, dtype=D))
    assert loss_intra(x, x).item() == 0.0
    a, b = l2_normalize(torch.randn(1, 5, dtype=D)), l2_normalize(torch.randn(1, 5, dtype=D))
    assert loss_intra(a, b).item() == pytest.approx(0.0, abs=1e-7)  # eps in the norm
    f = t([[1.0, 0.0], [0.0, 1.0]])
    F = t([[1.0, 0.0], [1.0, 0.0]])
    assert loss_intra(f, F).item() == pytest.approx(0.5, abs=1e-9)


def test_inter_examples():
    eye = torch.eye(4, dtype=D)
    bound = 3 * math.exp(-1 / 0.03)
    assert loss_inter(eye, eye, tau=0.03).item() <= bound + 1e-18
    assert loss_inter(eye, eye, tau=0.03).item() < 1e-12
    x = l2_normalize(torch.randn(1, 7, dtype=D))
    assert loss_inter(x, x, tau=0.03).item() == 0.0
    same = t([[0.6, 0.8], [0.6, 0.8]])
    assert loss_inter(same, same, tau=0.03).item() == pytest.approx(math.log(2), abs=1e-12)


def test_inter_rejects_bad_tau():
    with pytest.raises(NonPositiveTau):
        loss_inter(torch.eye(2), torch.eye(2), tau=0.0)


def test_lcl_examples():
    eye = torch.eye(5, dtype=D)
    assert loss_lcl(eye, eye).item() <= 1e-10
    x, y = torch.randn(3, 4, dtype=D), torch.randn(3, 4, dtype=D)
    assert loss_lcl(x, y, lambda1=0, lambda2=0).item() == 0.0
    f = t([[1.0, 0.0], [0.0, 1.0]])
    F = t([[1.0, 0.0], [1.0, 0.0]])
    assert loss_lcl(f, F, lambda1=5, lambda2=0).item() == pytest.approx(2.5, abs=1e-9)


def test_cos_kl_examples():
    x = torch.randn(4, 8, dtype=D)
    assert loss_cos(x, x).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_kl(x, x).item() == pytest.approx(0.0, abs=1e-12)
    u = l2_normalize(torch.randn(3, 8, dtype=D))
    assert loss_cos(u, -u).item() == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("fn", [loss_l1, loss_intra, loss_cos, loss_kl, lambda a, b: loss_inter(a, b, 0.03)])
def test_shape_mismatch(fn):
    with pytest.raises(ShapeMismatch):
        fn(torch.zeros(3, 4), torch.zeros(3, 5))


# ------------------------------------------------------------------ oracles
@pytest.mark.parametrize(
    "ours, oracle",
    [
        (loss_l1, oracles.l1),
        (loss_cos, oracles.cos),
        (loss_kl, oracles.kl),
        (loss_intra, oracles.intra),
        (lambda f, F: loss_inter(f, F, 0.03), lambda f, F: oracles.inter(f, F, 0.03)),
    ],
    ids=["l1", "cos", "kl", "intra", "inter"],
)
def test_matches_oracle(ours, oracle):
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, d = rng.integers(1, 9), rng.integers(1, 17)
        f = l2_normalize(torch.from_numpy(rng.normal(size=(n, d))))
        F = l2_normalize(torch.from_numpy(rng.normal(size=(n, d))))
        assert abs(ours(f, F).item() - oracle(f.tolist(), F.tolist())) < 1e-6


def test_mask_equals_sliced():
    f = l2_normalize(torch.randn(2, 6, 5, dtype=D))
    F = l2_normalize(torch.randn(2, 6, 5, dtype=D))
    mask = torch.tensor([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=torch.bool)
    for fn in (loss_l1, loss_intra, loss_cos, loss_kl, lambda a, b, mask=None: loss_inter(a, b, 0.03, mask)):
        batched = fn(f, F, mask=mask).item()
        separate = (fn(f[0, :4], F[0, :4]).item() + fn(f[1], F[1]).item()) / 2
        assert batched == pytest.approx(separate, abs=1e-12)


def test_masked_rows_carry_no_gradient():
    f = torch.randn(5, 4, dtype=D, requires_grad=True)
    F = l2_normalize(torch.randn(5, 4, dtype=D))
    mask = torch.tensor([1, 1, 1, 0, 0], dtype=torch.bool)
    loss_lcl(l2_normalize(f), F, mask=mask).backward()
    assert torch.all(f.grad[3:] == 0)
    assert torch.isfinite(f.grad).all()


# ------------------------------------------------------------------ properties
unit_pairs = st.tuples(st.integers(1, 8), st.integers(1, 16), st.integers(0, 2**31 - 1))


def _pair(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    return (
        l2_normalize(torch.randn(n, d, generator=g, dtype=D)),
        l2_normalize(torch.randn(n, d, generator=g, dtype=D)),
    )


@settings(max_examples=100, deadline=None)
@given(unit_pairs)
def test_symmetry_and_non_negativity(args):
    f, F = _pair(*args)
    assert loss_intra(f, F).item() == pytest.approx(loss_intra(F, f).item(), abs=1e-12)
    assert loss_l1(f, F).item() == pytest.approx(loss_l1(F, f).item(), abs=1e-12)
    for v in (loss_l1(f, F), loss_intra(f, F), loss_inter(f, F), loss_cos(f, F), loss_kl(f, F), loss_lcl(f, F)):
        assert v.item() >= -1e-12


def test_inter_is_not_symmetric():
    f = t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    F = t([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.6, 0.8, 0.0]])
    assert abs(loss_inter(f, F).item() - loss_inter(F, f).item()) > 1e-3


# ------------------------------------------------------------------ recognition loss
def _targets():
    return torch.tensor([[36, 12, 10, 29, 37, 38, 38], [36, 1, 37, 38, 38, 38, 38]])


def test_uniform_logits_give_ln39():
    logits = torch.zeros(2, 7, 39, dtype=D)
    assert loss_recognition(logits, _targets()).item() == pytest.approx(math.log(39), abs=1e-6)


def test_one_hot_logits_give_zero():
    targets = _targets()
    logits = torch.zeros(2, 7, 39, dtype=D)
    logits[:, :-1] = 100.0 * torch.nn.functional.one_hot(targets[:, 1:], 39)
    assert loss_total(logits, targets, 0.0).item() < 1e-12


def test_loss_total_is_additive():
    logits = torch.randn(2, 7, 39, dtype=D)
    r = loss_recognition(logits, _targets()).item()
    assert loss_total(logits, _targets(), 1.25).item() == pytest.approx(r + 1.25, abs=1e-12)


def test_pad_positions_do_not_matter():
    targets = _targets()
    logits = torch.randn(2, 7, 39, dtype=D)
    other = logits.clone()
    pad_pred = torch.zeros_like(targets, dtype=torch.bool)
    pad_pred[:, :-1] = targets[:, 1:] == 38
    pad_pred[:, -1] = True
    other[pad_pred] = torch.randn(int(pad_pred.sum()), 39, dtype=D) * 50
    assert loss_recognition(logits, targets).item() == loss_recognition(other, targets).item()


# ------------------------------------------------------------------ SDS
def tiny_setup(batch=3, seed=0, dtype=D):
    """Student/teacher features small enough for finite differences."""
    g = torch.Generator().manual_seed(seed)
    enc_tokens, enc_dim, dec_tokens, dec_dim = 5, 6, 4, 6
    img_tokens, img_dim, txt_dim = 3, 8, 8
    torch.manual_seed(seed)
    heads = AlignHeads(enc_tokens, enc_dim, dec_tokens, dec_dim, img_tokens, img_dim, dec_tokens, txt_dim, gam_hidden=7).to(dtype)
    enc = [torch.randn(batch, enc_tokens, enc_dim, generator=g, dtype=dtype) for _ in range(4)]
    dec = [torch.randn(batch, dec_tokens, dec_dim, generator=g, dtype=dtype) for _ in range(4)]
    mask = torch.ones(batch, dec_tokens, dtype=torch.bool)
    mask[0, 3:] = False
    mask[1, 2:] = False
    teacher = TeacherFeatures(
        image_stages=[torch.randn(batch, img_tokens, img_dim, generator=g, dtype=dtype) for _ in range(4)],
        text_stages=[torch.randn(batch, dec_tokens, txt_dim, generator=g, dtype=dtype) for _ in range(4)],
        text_mask=mask,
        text_cls=torch.randn(batch, txt_dim, generator=g, dtype=dtype),
        image_cls=torch.randn(batch, img_dim, generator=g, dtype=dtype),
    )
    return heads, enc, dec, teacher


def stages(enc, dec):
    return StudentStages(enc, [s[:, 0] for s in enc], dec, None)


def test_pairing_table_reverses_text_tower():
    by_name = {p.name: p for p in SDS_PAIRS}
    assert [p.name for p in SDS_PAIRS] == ["enc1", "enc2", "enc3", "gam", "dec1", "dec2", "dec3"]
    for i in (1, 2, 3):
        p = by_name[f"dec{i}"]
        assert (p.student, p.teacher, p.head) == ("dec", "text", "aam")
        assert p.student_stage + p.teacher_stage == 4
        q = by_name[f"enc{i}"]
        assert (q.teacher, q.teacher_stage, q.head) == ("image", i, "aam")
    gam = by_name["gam"]
    assert (gam.student, gam.student_stage, gam.teacher, gam.teacher_stage, gam.head) == ("enc", 4, "text", 4, "gam")


def test_sds_all_masked_is_zero():
    heads, enc, dec, teacher = tiny_setup()
    total, terms = loss_sds(stages(enc, dec), teacher, heads, LossWeights(stage_mask=(False,) * 7))
    assert total.item() == 0.0 and terms == {}


@pytest.mark.parametrize("base", ["lcl", "l1", "cos", "kl"])
def test_sds_is_sum_of_terms(base):
    heads, enc, dec, teacher = tiny_setup()
    w = LossWeights(base_loss=base)
    total, terms = loss_sds(stages(enc, dec), teacher, heads, w)
    separate = 0.0
    for pair in SDS_PAIRS:
        separate += term_loss(pair, stages(enc, dec), teacher, heads, w).item()
    assert len(terms) == 7
    assert total.item() == pytest.approx(separate, abs=1e-6)


def test_sds_stage_mask_counts_terms():
    heads, enc, dec, teacher = tiny_setup()
    for mask in [(0, 0, 0, 0, 1, 0, 0), (0, 0, 0, 0, 1, 0, 1), (1, 1, 1, 1, 1, 1, 1), (1, 0, 1, 0, 0, 1, 0)]:
        _, terms = loss_sds(stages(enc, dec), teacher, heads, LossWeights(stage_mask=mask))
        assert len(terms) == sum(mask)


def test_sds_decoder_identity_alignment():
    """Teacher text stages built as the exact projections of orthonormal student rows."""
    n, d = 4, 6
    heads = AlignHeads(5, d, n, d, 3, 8, n, d, gam_hidden=7).to(D)
    with torch.no_grad():
        for head in heads.dec:
            head.P.copy_(torch.eye(n, dtype=D))
            head.W1.weight.copy_(torch.eye(d, dtype=D))
    dec = [torch.eye(n, d, dtype=D).expand(2, n, d).clone() * (k + 1) for k in range(4)]
    enc = [torch.randn(2, 5, d, dtype=D) for _ in range(4)]
    text = [None] * 4
    for i in (1, 2, 3):
        text[4 - i - 1] = heads.dec[i - 1].project(dec[i - 1]).detach()
    text[3] = torch.randn(2, n, d, dtype=D)
    teacher = TeacherFeatures(
        image_stages=[torch.randn(2, 3, 8, dtype=D) for _ in range(4)],
        text_stages=text,
        text_mask=torch.ones(2, n, dtype=torch.bool),
        text_cls=torch.randn(2, d, dtype=D),
        image_cls=torch.randn(2, 8, dtype=D),
    )
    w = LossWeights(stage_mask=(0, 0, 0, 0, 1, 1, 1))
    total, _ = loss_sds(stages(enc, dec), teacher, heads, w)
    assert total.item() <= 1e-10


def test_sds_missing_stage():
    heads, enc, dec, teacher = tiny_setup()
    with pytest.raises(MissingStage):
        loss_sds(stages(enc[:3], dec), teacher, heads, LossWeights())


def test_sds_never_backpropagates_into_teacher():
    heads, enc, dec, teacher = tiny_setup()
    for s in teacher.image_stages + teacher.text_stages:
        s.requires_grad_(True)
    teacher.text_cls.requires_grad_(True)
    total, _ = loss_sds(stages([e.requires_grad_() for e in enc], dec), teacher, heads, LossWeights())
    total.backward()
    assert all(s.grad is None for s in teacher.image_stages + teacher.text_stages)
    assert teacher.text_cls.grad is None
    assert all(p.grad is not None for p in heads.parameters())


def test_sds_gradient_matches_finite_differences():
    heads, enc, dec, teacher = tiny_setup(batch=2, seed=3)
    enc = [e.requires_grad_() for e in enc]
    dec = [d.requires_grad_() for d in dec]
    w = LossWeights()
    leaves = enc + dec + list(heads.parameters())

    def value():
        return loss_sds(stages(enc, dec), teacher, heads, w)[0]

    grads = torch.autograd.grad(value(), leaves, allow_unused=True)
    h = 1e-5
    with torch.no_grad():
        for leaf, grad in zip(leaves, grads):
            grad = torch.zeros_like(leaf) if grad is None else grad
            numeric = torch.zeros_like(leaf)
            flat, nflat = leaf.view(-1), numeric.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + h
                up = value().item()
                flat[k] = old - h
                down = value().item()
                flat[k] = old
                nflat[k] = (up - down) / (2 * h)
            scale = max(grad.norm().item(), numeric.norm().item())
            if scale > 0:
                assert (grad - numeric).norm().item() / scale < 1e-4
