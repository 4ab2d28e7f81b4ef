"""Multi-run drivers: teacher caches, beta sweeps, ablations and the desk benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch.nn as nn

from .baselines import Strategy
from .config import ABLATION_FLAGS, DistillConfig
from .data import Dataset
from .errors import ConfigError
from .metrics import summarize
from .models import load_checkpoint
from .trainer import (TrainReport, distill, train_scratch_student, train_teacher, write_csv,
                      write_summary)

log = logging.getLogger(__name__)

DEFAULT_BETAS = (0.1, 1.0, 10.0, 100.0, 500.0)


def teacher_path(out_dir: str | Path, seed: int) -> Path:
    return Path(out_dir) / "teachers" / f"teacher-{seed}.ckpt"


def ensure_teachers(cfg: DistillConfig, train: Dataset, test: Dataset,
                    out_dir: str | Path | None = None) -> tuple[list[nn.Module], list[float]]:
    """Load teachers from ``out_dir/teachers`` when present, otherwise train and save them."""
    models, accs = [], []
    for seed in cfg.teacher_seeds:
        path = teacher_path(out_dir, seed) if out_dir is not None else None
        if path is not None and path.exists():
            model = load_checkpoint(path)
            acc = model.checkpoint_extra.get("test_top1", float("nan"))
        else:
            model, acc, _ = train_teacher(cfg, train, test, seed, out_dir)
        models.append(model)
        accs.append(acc)
    return models, accs


def sweep_beta(cfg: DistillConfig, teachers: Sequence[nn.Module], train: Dataset, test: Dataset,
               values: Sequence[float] = DEFAULT_BETAS, out_dir: str | Path | None = None,
               plot: bool | None = None) -> list[dict]:
    """One distillation per beta and seed; returns rows ``{beta, seed, top1}``."""
    if not values:
        raise ConfigError("beta sweep needs at least one value")
    rows, summary = [], []
    for beta in values:
        sub = None if out_dir is None else Path(out_dir) / f"beta-{beta:g}"
        report = distill(cfg.replace(beta=float(beta), plot=False), teachers, train, test, sub)
        rows += [{"beta": float(beta), "seed": r.seed, "top1": r.final_top1} for r in report.runs]
        summary.append((float(beta), report.mean_top1, report.std_top1))
    if out_dir is not None:
        write_csv(Path(out_dir) / "sweep-beta.csv", ["beta", "seed", "top1"], rows)
        if cfg.plot if plot is None else plot:
            from .plotting import plot_beta_sweep
            b, m, s = zip(*summary)
            plot_beta_sweep(b, m, s, Path(out_dir) / "sweep-beta.png")
    return rows


def check_single_ablation(cfg: DistillConfig) -> str:
    """Name of the one active ablation flag; anything else is a configuration error."""
    active = cfg.active_ablations
    if {"uniform_wr", "uniform_wf"} <= set(active):
        raise ConfigError("uniform_wr and uniform_wf cannot be combined")
    if len(active) != 1:
        raise ConfigError(f"exactly one ablation flag must be set, got {active or 'none'}")
    if cfg.strategy_kind is not Strategy.MMKD:
        raise ConfigError("ablations apply to the mmkd strategy")
    return active[0]


def run_ablation(cfg: DistillConfig, teachers: Sequence[nn.Module], train: Dataset, test: Dataset,
                 out_dir: str | Path | None = None) -> TrainReport:
    flag = check_single_ablation(cfg)
    return distill(cfg, teachers, train, test, out_dir, name=f"mmkd-{flag}")


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)
    reports: list[TrainReport] = field(default_factory=list)

    def mean(self, variant: str) -> float:
        return next(r["mean_top1"] for r in self.rows if r["variant"] == variant)


def ablation_suite(cfg: DistillConfig, teachers: Sequence[nn.Module], train: Dataset, test: Dataset,
                   out_dir: str | Path | None = None, full: TrainReport | None = None,
                   flags: Sequence[str] = ABLATION_FLAGS) -> AblationTable:
    """Full MMKD plus each single ablation; ``full`` reuses an existing MMKD report."""
    base = cfg.replace(strategy="mmkd", **{f: False for f in ABLATION_FLAGS})
    if full is None:
        full = distill(base, teachers, train, test, out_dir, name="mmkd")
    table = AblationTable(reports=[full])
    for flag in flags:
        table.reports.append(run_ablation(base.replace(**{flag: True}), teachers, train, test, out_dir))
    for rep in table.reports:
        variant = "full" if rep is full else rep.name.removeprefix("mmkd-")
        table.rows.append({"variant": variant, "mean_top1": rep.mean_top1, "std_top1": rep.std_top1,
                           "delta_vs_full": rep.mean_top1 - full.mean_top1})
    if out_dir is not None:
        write_csv(Path(out_dir) / "ablation.csv", ["variant", "mean_top1", "std_top1", "delta_vs_full"],
                  table.rows)
        if cfg.plot:
            from .plotting import plot_ablation
            plot_ablation([r["variant"] for r in table.rows], [r["mean_top1"] for r in table.rows],
                          [r["std_top1"] for r in table.rows], Path(out_dir) / "ablation.png")
    return table


@dataclass
class Benchmark:
    teacher_accs: list[float]
    scratch_accs: list[float]
    reports: dict[str, TrainReport]
    wall_clock_s: float

    @property
    def scratch_mean(self) -> float:
        return summarize(self.scratch_accs)[0]

    def margin_over_scratch(self, name: str) -> float:
        return self.reports[name].mean_top1 - self.scratch_mean


def desk_benchmark(cfg: DistillConfig, train: Dataset, test: Dataset, out_dir: str | Path | None = None,
                   strategies: Sequence[str] = ("aver", "ebkd", "camkd", "mmkd"),
                   teachers: Sequence[nn.Module] | None = None) -> Benchmark:
    """Teachers, label-only students and every requested strategy over ``cfg.seeds``."""
    t0 = time.perf_counter()
    if teachers is None:
        teachers, teacher_accs = ensure_teachers(cfg, train, test, out_dir)
    else:
        teacher_accs = []
    scratch = [train_scratch_student(cfg, train, test, s) for s in cfg.seeds]
    reports = {}
    for name in strategies:
        reports[name] = distill(cfg.replace(strategy=name), teachers, train, test, out_dir, name=name)
        log.info("%s mean top-1 %.2f", name, reports[name].mean_top1)
    bench = Benchmark(list(teacher_accs), scratch, reports, time.perf_counter() - t0)
    if out_dir is not None:
        rows = [{"name": "student", "seed": s, "top1": a, "std": ""} for s, a in zip(cfg.seeds, scratch)]
        write_summary(Path(out_dir) / "benchmark.csv", list(reports.values()))
        write_csv(Path(out_dir) / "scratch.csv", ["name", "seed", "top1", "std"], rows)
    return bench
