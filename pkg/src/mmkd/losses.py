"""Weighted ensemble KL, weighted feature MSE, cross-entropy and their total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .models import BatchOutput

PROB_FLOOR = 1e-12


def _log_probs(logits: torch.Tensor, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    p = F.softmax(logits / tau, dim=-1)
    return p, torch.log(p.clamp_min(PROB_FLOOR))


def per_teacher_kl(teacher_logits: Sequence[torch.Tensor], student_logits: torch.Tensor,
                   tau: float) -> torch.Tensor:
    """KL(teacher_k || student) per sample, shape [b, K]."""
    _, log_ps = _log_probs(student_logits, tau)
    cols = []
    for z in teacher_logits:
        pt, log_pt = _log_probs(z, tau)
        cols.append((pt * (log_pt - log_ps)).sum(dim=1))
    return torch.stack(cols, dim=1)


def per_teacher_sq_error(teacher_feats: Sequence[torch.Tensor], student_aligned: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per sample and teacher, shape [b, K]."""
    return torch.stack([((f - student_aligned) ** 2).sum(dim=1) for f in teacher_feats], dim=1)


def kd_ensemble_loss(w_r: torch.Tensor, teacher_logits: Sequence[torch.Tensor],
                     student_logits: torch.Tensor, tau: float) -> torch.Tensor:
    kl = per_teacher_kl(teacher_logits, student_logits, tau)
    return (w_r * kl).sum(dim=1).mean()


def feature_ensemble_loss(w_f: torch.Tensor, teacher_feats: Sequence[torch.Tensor],
                          student_aligned: torch.Tensor) -> torch.Tensor:
    sq = per_teacher_sq_error(teacher_feats, student_aligned)
    return (w_f * sq).sum(dim=1).mean()


def per_sample_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy at temperature 1; ``labels`` may be one-hot [b, C] or class indices [b]."""
    if labels.ndim == 2:
        labels = labels.argmax(dim=1)
    p = F.softmax(logits, dim=1)
    p_true = p.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp_min(PROB_FLOOR))


def ce_loss(student_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return per_sample_ce(student_logits, labels).mean()


def total_loss(l_ce, l_f, l_r, alpha: float, beta: float):
    return l_ce + alpha * l_f + beta * l_r


@dataclass
class LossBundle:
    L_r: torch.Tensor
    L_f: torch.Tensor
    L_CE: torch.Tensor
    L_total: torch.Tensor
    alpha: float
    beta: float
    tau: float

    def as_floats(self) -> dict[str, float]:
        return {"L_CE": self.L_CE.item(), "L_f": self.L_f.item(),
                "L_r": self.L_r.item(), "L_total": self.L_total.item()}


def distill_losses(student: BatchOutput, student_aligned: torch.Tensor,
                   teachers: Sequence[BatchOutput], labels: torch.Tensor,
                   w_r: torch.Tensor, w_f: torch.Tensor,
                   alpha: float, beta: float, tau: float) -> LossBundle:
    """All loss terms for one batch. Teacher outputs are treated as constants."""
    l_r = kd_ensemble_loss(w_r, [t.logits.detach() for t in teachers], student.logits, tau)
    l_f = feature_ensemble_loss(w_f, [t.features.detach() for t in teachers], student_aligned)
    l_ce = ce_loss(student.logits, labels)
    return LossBundle(l_r, l_f, l_ce, total_loss(l_ce, l_f, l_r, alpha, beta), alpha, beta, tau)
