"""Static figure output (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_learning_curves(report, path: str | Path) -> Path:
    """Test top-1 and total loss per epoch, one line per seed."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    for run in report.runs:
        ep = [r["epoch"] for r in run.rows]
        ax_acc.plot(ep, [r["test_top1"] for r in run.rows], label=f"seed {run.seed}")
        ax_loss.plot(ep, [r["L_total"] for r in run.rows], label=f"seed {run.seed}")
    ax_acc.set(xlabel="epoch", ylabel="test top-1 (%)", title=report.name)
    ax_loss.set(xlabel="epoch", ylabel="L_total", yscale="log")
    ax_acc.legend(fontsize=8)
    return _save(fig, path)


def plot_beta_sweep(betas: Sequence[float], means: Sequence[float], stds: Sequence[float],
                    path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(betas, means, yerr=stds, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set(xlabel="beta", ylabel="test top-1 (%)", title="accuracy vs beta")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ablation(names: Sequence[str], means: Sequence[float], stds: Sequence[float],
                  path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(names))
    ax.bar(x, means, yerr=stds, capsize=3, color=["C0"] + ["C1"] * (len(names) - 1))
    ax.set_xticks(x, names, rotation=20)
    lo = min(m - s for m, s in zip(means, stds))
    ax.set_ylim(max(0.0, lo - 2.0), min(100.0, max(m + s for m, s in zip(means, stds)) + 1.0))
    ax.set(ylabel="test top-1 (%)", title="ablations")
    return _save(fig, path)
