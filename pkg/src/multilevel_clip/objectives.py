"""Training objective: three-level contrastive alignment plus EMA-teacher distillation.

``L_total = lambda_kd * L_KD + lambda_ca * L_CA``. On the visual side the
teacher's global embedding is distilled into every student object/relation
embedding; on the text side the direction flips and the teacher's object and
relation embeddings are distilled into the student's global text embedding.
"""

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ._validation import check_positive
from .exceptions import InvalidInputError, InvalidParameterError


def _check_temperature(t, name="temperature"):
    value = float(t.detach()) if torch.is_tensor(t) else t
    if not value > 0:
        raise InvalidParameterError(f"{name} must be > 0, got {value!r}")


def contrastive_loss(img_rows, txt_rows, temperature):
    """Symmetric CLIP loss over ``N`` paired rows (diagonal targets)."""
    _check_temperature(temperature)
    if img_rows.shape != txt_rows.shape:
        raise InvalidInputError(f"row mismatch: {tuple(img_rows.shape)} vs {tuple(txt_rows.shape)}")
    n = img_rows.shape[0]
    if n == 0:
        return img_rows.new_zeros(())
    logits = F.normalize(img_rows, dim=-1) @ F.normalize(txt_rows, dim=-1).T / temperature
    targets = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def _pad_negatives(negatives, like):
    if torch.is_tensor(negatives):
        return negatives, torch.ones(negatives.shape[:2], dtype=torch.bool)
    k = max((len(n) for n in negatives), default=0)
    out = like.new_zeros(len(negatives), k, like.shape[-1])
    mask = torch.zeros(len(negatives), k, dtype=torch.bool)
    for i, n in enumerate(negatives):
        if len(n):
            out[i, : len(n)] = n
            mask[i, : len(n)] = True
    return out, mask


def relation_contrastive_loss(img_rows, txt_rows, negatives, temperature, neg_mask=None):
    """Contrastive loss whose image-to-text rows also compete with per-row negative texts.

    ``negatives`` is an ``(N, K, d)`` tensor (with optional boolean ``neg_mask``)
    or a list of ``(K_i, d)`` tensors. The text-to-image direction uses only the
    in-batch ``N x N`` block.
    """
    _check_temperature(temperature)
    n = img_rows.shape[0]
    if n == 0:
        return img_rows.new_zeros(())
    negs, mask = _pad_negatives(negatives, img_rows)
    if neg_mask is not None:
        mask = neg_mask
    if negs.shape[0] != n or not bool(mask.any(dim=1).all()):
        raise InvalidInputError("every relation row needs at least one negative triplet embedding")
    img = F.normalize(img_rows, dim=-1)
    txt = F.normalize(txt_rows, dim=-1)
    neg = F.normalize(negs, dim=-1)
    in_batch = img @ txt.T / temperature
    extra = torch.einsum("nd,nkd->nk", img, neg) / temperature
    extra = extra.masked_fill(~mask, float("-inf"))
    targets = torch.arange(n)
    i2t = F.cross_entropy(torch.cat([in_batch, extra], dim=1), targets)
    t2i = F.cross_entropy(in_batch.T, targets)
    return 0.5 * (i2t + t2i)


def kl_embedding_divergence(teacher_vec, student_vec, tau):
    """``tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))`` over the last axis.

    The teacher is detached. Leading axes broadcast, giving one value per row.
    """
    _check_temperature(tau, "tau")
    log_p = F.log_softmax(teacher_vec.detach() / tau, dim=-1)
    log_q = F.log_softmax(student_vec / tau, dim=-1)
    return tau * tau * (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def kd_terms(student, teacher, tau):
    """All ``2 * (n_O + n_R)`` divergence terms of one scene, as a 1-D tensor."""
    if (student.n_O, student.n_R) != (teacher.n_O, teacher.n_R):
        raise InvalidInputError(
            f"student has (n_O, n_R)=({student.n_O}, {student.n_R}), "
            f"teacher has ({teacher.n_O}, {teacher.n_R})")
    v_g = teacher.V_G.detach()
    parts = [
        kl_embedding_divergence(v_g.expand_as(student.V_O), student.V_O, tau),
        kl_embedding_divergence(v_g.expand_as(student.V_R), student.V_R, tau),
        kl_embedding_divergence(teacher.T_O, student.T_G.expand_as(teacher.T_O), tau),
        kl_embedding_divergence(teacher.T_R, student.T_G.expand_as(teacher.T_R), tau),
    ]
    return torch.cat(parts)


def kd_loss(student, teacher, tau):
    """Distillation loss of one scene: the sum of :func:`kd_terms`."""
    return kd_terms(student, teacher, tau).sum()


def kd_loss_batch(student, teacher, tau):
    """Per-scene distillation sums averaged over the batch (vectorised)."""
    if student.obj_counts != teacher.obj_counts or student.rel_counts != teacher.rel_counts:
        raise InvalidInputError("student and teacher batches describe different scenes")
    obj_idx = student.object_scene_index()
    rel_idx = student.relation_scene_index()
    t_vg = teacher.V_G.detach()
    total = (kl_embedding_divergence(t_vg[obj_idx], student.V_O, tau).sum()
             + kl_embedding_divergence(t_vg[rel_idx], student.V_R, tau).sum()
             + kl_embedding_divergence(teacher.T_O, student.T_G[obj_idx], tau).sum()
             + kl_embedding_divergence(teacher.T_R, student.T_G[rel_idx], tau).sum())
    return total / student.batch_size


@dataclass
class LossBreakdown:
    total: torch.Tensor
    kd: torch.Tensor
    ca: torch.Tensor
    ca_terms: dict
    lambda_kd: float
    lambda_ca: float
    alignment_shapes: dict = field(default_factory=dict)

    def as_dict(self):
        out = {
            "L_total": float(self.total.detach()),
            "L_KD": float(self.kd.detach()),
            "L_CA": float(self.ca.detach()),
            "lambda_kd": float(self.lambda_kd),
            "lambda_ca": float(self.lambda_ca),
        }
        out.update({f"L_CA_{k}": float(v.detach()) for k, v in self.ca_terms.items()})
        return out


def ca_loss(batch, temperatures):
    """Three-level contrastive alignment over a :class:`~multilevel_clip.encoders.BatchEmbeddings`.

    Returns ``(total, terms, shapes)`` where ``shapes`` records the alignment
    matrix sizes: ``B x B``, ``sum n_O x sum n_O`` and, for relations, the
    ``sum n_R x (sum n_R + K)`` image-to-text matrix and its ``sum n_R x sum n_R``
    text-to-image block.
    """
    if batch.batch_size < 1:
        raise InvalidInputError("batch must contain at least one scene")
    t_g, t_o, t_r = temperatures[0], temperatures[1], temperatures[2]
    n_o, n_r = batch.V_O.shape[0], batch.V_R.shape[0]
    terms = {
        "global": contrastive_loss(batch.V_G, batch.T_G, t_g),
        "object": contrastive_loss(batch.V_O, batch.T_O, t_o),
        "relation": (relation_contrastive_loss(batch.V_R, batch.T_R, batch.T_neg, t_r,
                                               batch.neg_mask)
                     if n_r else batch.V_G.new_zeros(())),
    }
    k = batch.T_neg.shape[1] if n_r else 0
    shapes = {
        "global": (batch.batch_size, batch.batch_size),
        "object": (n_o, n_o),
        "relation_i2t": (n_r, n_r + k),
        "relation_t2i": (n_r, n_r),
    }
    return terms["global"] + terms["object"] + terms["relation"], terms, shapes


def total_loss(student, teacher, lambda_kd, lambda_ca, temperatures, tau):
    """Weighted sum of batch-mean distillation and contrastive alignment."""
    check_positive(lambda_kd, "lambda_kd", strict=False)
    check_positive(lambda_ca, "lambda_ca")
    ca, terms, shapes = ca_loss(student, temperatures)
    if teacher is None:
        if lambda_kd:
            raise InvalidInputError("a teacher batch is required when lambda_kd > 0")
        kd = ca.new_zeros(())
    else:
        kd = kd_loss_batch(student, teacher, tau)
    total = lambda_kd * kd + lambda_ca * ca
    return LossBreakdown(total, kd, ca, terms, lambda_kd, lambda_ca, shapes)


# ----------------------------------------------------------------------- EMA

@dataclass
class EMAState:
    """Teacher copy of the student, updated by exponential moving average.

    During the first ``warmup_steps`` optimisation steps the teacher is an exact
    copy of the student.
    """

    teacher: nn.Module
    decay: float = 0.9995
    step: int = 0
    warmup_steps: int = 2000

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise InvalidParameterError(f"decay must lie in (0, 1), got {self.decay}")

    @classmethod
    def from_student(cls, student, decay=0.9995, warmup_steps=2000):
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher.eval()
        return cls(teacher, decay, 0, warmup_steps)

    def state_dict(self):
        return {"teacher": self.teacher.state_dict(), "decay": self.decay,
                "step": self.step, "warmup_steps": self.warmup_steps}


def _named_tensors(obj):
    if isinstance(obj, nn.Module):
        return dict(obj.named_parameters())
    return dict(obj)


@torch.no_grad()
def ema_update(ema, student_params, step=None):
    """Copy (warm-up) or blend ``decay * teacher + (1 - decay) * student``; advances ``ema.step``."""
    step = ema.step if step is None else step
    teacher = _named_tensors(ema.teacher)
    student = _named_tensors(student_params)
    if teacher.keys() != student.keys():
        raise InvalidInputError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name].detach()
        if t.shape != s.shape:
            raise InvalidInputError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if step < ema.warmup_steps:
            t.copy_(s)
        else:
            t.mul_(ema.decay).add_(s, alpha=1.0 - ema.decay)
    ema.step = step + 1
    return ema
