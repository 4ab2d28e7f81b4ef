"""Fixed weighting strategies used as comparison points.

EBKD and CA-MKD are reconstructed as ``softmax(-score)`` over teachers, with
the score being the teacher's prediction entropy or its cross-entropy against
the label respectively.
"""

from __future__ import annotations

import enum
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .losses import PROB_FLOOR, distill_losses, per_sample_ce
from .models import BatchOutput


class Strategy(str, enum.Enum):
    AVER = "aver"
    FITNET = "fitnet"
    EBKD = "ebkd"
    CAMKD = "camkd"
    MMKD = "mmkd"

    @classmethod
    def parse(cls, value) -> "Strategy":
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown strategy {value!r}; choose from {[s.value for s in cls]}") from None


def aver_weights(b: int, k: int, dtype=torch.float32, device=None) -> torch.Tensor:
    if k < 1:
        raise ConfigError("need at least one teacher")
    return torch.full((b, k), 1.0 / k, dtype=dtype, device=device)


def ebkd_weights(teacher_logits: Sequence[torch.Tensor], tau: float) -> torch.Tensor:
    ents = []
    for z in teacher_logits:
        p = F.softmax(z / tau, dim=1)
        ents.append(-(p * torch.log(p.clamp_min(PROB_FLOOR))).sum(dim=1))
    return F.softmax(-torch.stack(ents, dim=1), dim=1)


def camkd_weights(teacher_logits: Sequence[torch.Tensor], labels: torch.Tensor, tau: float) -> torch.Tensor:
    ces = [per_sample_ce(z / tau, labels) for z in teacher_logits]
    return F.softmax(-torch.stack(ces, dim=1), dim=1)


def fixed_weights(strategy: Strategy, teachers: Sequence[BatchOutput], labels: torch.Tensor,
                  tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """``(w_r, w_f)`` for the non-learned strategies; both terms share one weighting."""
    logits = [t.logits for t in teachers]
    ref = logits[0]
    if strategy in (Strategy.AVER, Strategy.FITNET, Strategy.MMKD):
        w = aver_weights(ref.shape[0], len(logits), ref.dtype, ref.device)
    elif strategy is Strategy.EBKD:
        w = ebkd_weights(logits, tau)
    elif strategy is Strategy.CAMKD:
        w = camkd_weights(logits, labels, tau)
    else:
        raise ConfigError(f"no fixed weighting for {strategy}")
    return w, w


def fitnet_mkd_loss(teacher_feats: Sequence[torch.Tensor], student_aligned: torch.Tensor,
                    teacher_logits: Sequence[torch.Tensor], student_logits: torch.Tensor,
                    labels: torch.Tensor, tau: float, alpha: float, beta: float) -> torch.Tensor:
    """CE + alpha * mean feature hint MSE + beta * mean KD term, all teachers weighted equally."""
    b, k = student_logits.shape[0], len(teacher_logits)
    w = aver_weights(b, k, student_logits.dtype, student_logits.device)
    student = BatchOutput(student_logits, student_aligned)
    teachers = [BatchOutput(z, f) for z, f in zip(teacher_logits, teacher_feats)]
    return distill_losses(student, student_aligned, teachers, labels, w, w, alpha, beta, tau).L_total
