"""Meta-weight network: per-instance teacher weights for logits and for features.

The logits head sees the tau-softened class distributions of the student and
every teacher, concatenated per sample. The feature head sees each sample's
row of the b x b activation-similarity matrices, concatenated the same way.
Both heads are Linear -> ReLU -> Linear -> softmax over the K teachers.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .models import ARCHS, BatchOutput


def build_logit_input(z_s: torch.Tensor, z_teachers: Sequence[torch.Tensor], tau: float) -> torch.Tensor:
    """[b, C(K+1)]: softened student distribution first, then teachers in order."""
    blocks = [z_s, *z_teachers]
    shape = z_s.shape
    for z in z_teachers:
        if z.shape != shape:
            raise ConfigError(f"teacher logits {tuple(z.shape)} do not match student {tuple(shape)}")
    return torch.cat([F.softmax(z / tau, dim=1) for z in blocks], dim=1)


def similarity_matrix(q: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    q = q.flatten(1)
    if normalize:
        q = F.normalize(q, p=2, dim=1)
    return q @ q.T


def build_feature_input(g_s: torch.Tensor, g_teachers: Sequence[torch.Tensor],
                        batch_size: int | None = None) -> torch.Tensor:
    b = g_s.shape[0]
    if batch_size is not None and b != batch_size:
        raise ConfigError(f"batch of {b} samples but the feature head expects {batch_size} "
                          "(batches must be drop-last with a constant size)")
    for g in g_teachers:
        if g.shape != (b, b):
            raise ConfigError(f"similarity matrix {tuple(g.shape)} does not match batch size {b}")
    return torch.cat([g_s, *g_teachers], dim=1)


class MetaWeightNet(nn.Module):
    """Holds the parameters of both weight heads (phi)."""

    def __init__(self, num_classes: int, num_teachers: int, batch_size: int,
                 logit_hidden: int | None = None, feature_hidden: int | None = None,
                 normalize_similarity: bool = False):
        super().__init__()
        if num_teachers < 1:
            raise ConfigError("need at least one teacher")
        self.num_classes = int(num_classes)
        self.num_teachers = int(num_teachers)
        self.batch_size = int(batch_size)
        self.logit_hidden = int(logit_hidden or max(64, 2 * num_classes))
        self.feature_hidden = int(feature_hidden or batch_size)
        self.normalize_similarity = bool(normalize_similarity)
        k1 = self.num_teachers + 1
        self.logit_head = nn.Sequential(
            nn.Linear(self.num_classes * k1, self.logit_hidden), nn.ReLU(),
            nn.Linear(self.logit_hidden, self.num_teachers))
        self.feature_head = nn.Sequential(
            nn.Linear(self.batch_size * k1, self.feature_hidden), nn.ReLU(),
            nn.Linear(self.feature_hidden, self.num_teachers))
        self.zero_final_layers()

    def zero_final_layers(self) -> None:
        # Uniform weights at step 0: training starts from plain averaging.
        with torch.no_grad():
            for head in (self.logit_head, self.feature_head):
                head[-1].weight.zero_()
                head[-1].bias.zero_()

    def descriptor(self) -> dict:
        return {"arch": "meta", "num_classes": self.num_classes, "num_teachers": self.num_teachers,
                "batch_size": self.batch_size, "logit_hidden": self.logit_hidden,
                "feature_hidden": self.feature_hidden, "normalize_similarity": self.normalize_similarity}

    def logit_weights(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.logit_head[0].in_features:
            raise ConfigError(f"logit head expects width {self.logit_head[0].in_features}, got {z.shape[1]}")
        return F.softmax(self.logit_head(z), dim=1)

    def feature_weights(self, g: torch.Tensor) -> torch.Tensor:
        if g.shape[1] != self.feature_head[0].in_features:
            raise ConfigError(f"feature head expects width {self.feature_head[0].in_features}, got {g.shape[1]}")
        return F.softmax(self.feature_head(g), dim=1)

    def forward(self, student: BatchOutput, teachers: Sequence[BatchOutput],
                tau: float) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(w_r, w_f)``, each [b, K]."""
        z = build_logit_input(student.logits, [t.logits for t in teachers], tau)
        sim = lambda q: similarity_matrix(q, self.normalize_similarity)  # noqa: E731
        g = build_feature_input(sim(student.features), [sim(t.features) for t in teachers],
                                self.batch_size)
        return self.logit_weights(z), self.feature_weights(g)


def logit_weights(z: torch.Tensor, meta: MetaWeightNet) -> torch.Tensor:
    return meta.logit_weights(z)


def feature_weights(g: torch.Tensor, meta: MetaWeightNet) -> torch.Tensor:
    return meta.feature_weights(g)


def mean_entropy(w: torch.Tensor) -> float:
    """Mean Shannon entropy (nats) of the weight rows."""
    w = w.detach()
    return float(-(w * torch.log(w.clamp_min(1e-12))).sum(1).mean())


ARCHS["meta"] = MetaWeightNet
