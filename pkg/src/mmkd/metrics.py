"""Accuracy, mean/std summaries and the average relative improvement (ARI)."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError


@torch.no_grad()
def evaluate(model: torch.nn.Module, dataset, chunk: int = 4096) -> float:
    """Top-1 accuracy in percent. Argmax ties resolve to the lowest class index."""
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(dataset.inputs))
    n_in = getattr(model, "n_in", x.shape[1])
    if x.shape[1] != n_in or getattr(model, "num_classes", dataset.num_classes) != dataset.num_classes:
        raise ConfigError("model does not match the dataset's input width or class count")
    dtype = next(model.parameters()).dtype
    correct = 0
    for i in range(0, x.shape[0], chunk):
        logits = model(x[i:i + chunk].to(dtype)).logits
        pred = logits.argmax(dim=1).numpy()
        correct += int((pred == dataset.labels[i:i + chunk]).sum())
    return 100.0 * correct / len(dataset)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def ari(mmkd_accs: Sequence[float], baseline_accs: Sequence[float], student_accs: Sequence[float]) -> float:
    """Mean over pairs of (acc_mmkd - acc_base) / (acc_base - acc_student), in percent."""
    if not (len(mmkd_accs) == len(baseline_accs) == len(student_accs)) or not mmkd_accs:
        raise ConfigError("ARI needs equally long, non-empty accuracy lists")
    terms = []
    for i, (m, b, s) in enumerate(zip(mmkd_accs, baseline_accs, student_accs)):
        if b - s == 0:
            raise ConfigError(f"ARI undefined for pair {i}: baseline accuracy equals student accuracy ({b})")
        terms.append((m - b) / (b - s))
    return 100.0 * float(np.mean(terms))
