"""Training loops: teacher pretraining, label-only students, and distillation runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import bilevel
from .baselines import Strategy, fixed_weights
from .buffer import HardBuffer, HoldoutBuffer, ReplayBuffer, score_difficulty
from .config import DistillConfig
from .data import BatchPlan, Dataset, batches, load_dataset, load_idx, make_blobs, data_dir
from .errors import BufferNotReady, ConfigError, TrainingError
from .losses import ce_loss, distill_losses
from .meta_weight import MetaWeightNet
from .metrics import evaluate, summarize
from .models import MLP, AlignmentMap, BatchOutput, SmallCNN, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "L_CE", "L_f", "L_r", "L_total", "test_top1",
                  "buffer_min_difficulty", "meta_updates", "wall_clock_s"]
META_COLUMNS = ["step", "outer_ce_before", "outer_ce_after", "hypergrad_norm", "mean_entropy_wr"]
STEP_COLUMNS = ["step", "epoch", "L_CE", "L_f", "L_r", "L_total", "alpha_L_f"]


@dataclass
class RunResult:
    name: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    meta_rows: list[dict] = field(default_factory=list)
    step_rows: list[dict] = field(default_factory=list)
    final_top1: float = float("nan")
    meta_updates: int = 0
    skipped_meta_updates: int = 0
    wall_clock_s: float = 0.0

    @property
    def step_losses(self) -> list[float]:
        return [r["L_total"] for r in self.step_rows]


@dataclass
class TrainReport:
    name: str
    runs: list[RunResult]
    mean_top1: float
    std_top1: float
    wall_clock_s: float

    @property
    def accuracies(self) -> list[float]:
        return [r.final_top1 for r in self.runs]


# -- setup helpers ----------------------------------------------------------------

def load_data(cfg: DistillConfig, data_root: str | Path | None = None) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "blobs":
        kw = {} if d.spread is None else {"spread": d.spread}
        return make_blobs(d.num_classes, d.per_class, d.n_in, seed=d.seed, **kw)
    root = data_dir(data_root)
    if d.kind == "idx":
        if not (d.train_images and d.train_labels and d.test_images and d.test_labels):
            raise ConfigError("idx data needs train/test image and label paths")
        return (load_idx(root / d.train_images, root / d.train_labels, None, "train"),
                load_idx(root / d.test_images, root / d.test_labels, None, "test"))
    if d.kind == "cache":
        return load_dataset(root / d.train_images, "train"), load_dataset(root / d.test_images, "test")
    raise ConfigError(f"unknown data kind {d.kind!r}")


def build_net(cfg: DistillConfig, hidden: Sequence[int], dataset: Dataset) -> nn.Module:
    if cfg.arch == "mlp":
        return MLP(dataset.n_in, dataset.num_classes, hidden)
    shape = cfg.data.image_shape
    if not shape:
        side = int(round(math.sqrt(dataset.n_in)))
        if side * side != dataset.n_in:
            raise ConfigError("cnn needs data.image_shape for non-square inputs")
        shape = [1, side, side]
    return SmallCNN(shape, dataset.num_classes, channels=hidden if len(hidden) == 4 else (16, 32, 32, 64))


def _optimizer(cfg: DistillConfig, params, weight_decay: float | None = None):
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=wd)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.lr_milestones), gamma=cfg.lr_decay)
    return opt, sched


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value):
        raise TrainingError(f"{what} became non-finite ({value.item()})")


def _clipped_step(cfg: DistillConfig, opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad()
    loss.backward()
    if cfg.grad_clip:
        params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    opt.step()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


# -- supervised training (teachers, scratch students) -----------------------------

def train_supervised(model: nn.Module, cfg: DistillConfig, train: Dataset, test: Dataset,
                     seed: int, epochs: int | None = None, weight_decay: float | None = None) -> float:
    """Label-only cross-entropy training; returns final test top-1."""
    opt, sched = _optimizer(cfg, model.parameters(), weight_decay)
    plan = BatchPlan(cfg.batch_size, seed)
    for epoch in range(cfg.epochs if epochs is None else epochs):
        model.train()
        for x, y, _ in batches(train, plan, epoch):
            loss = ce_loss(model(torch.from_numpy(x)).logits, torch.from_numpy(y))
            _check_finite(loss, "cross-entropy")
            _clipped_step(cfg, opt, loss)
        sched.step()
    return evaluate(model, test)


def train_teacher(cfg: DistillConfig, train: Dataset, test: Dataset, seed: int,
                  out_dir: str | Path | None = None) -> tuple[nn.Module, float, Path | None]:
    torch.manual_seed(seed)
    model = build_net(cfg, cfg.teacher_hidden, train)
    acc = train_supervised(model, cfg, train, test, seed, cfg.teacher_epochs, cfg.teacher_weight_decay)
    path = None
    if out_dir is not None:
        path = save_checkpoint(Path(out_dir) / "teachers" / f"teacher-{seed}.ckpt", model,
                               {"test_top1": acc, "seed": seed})
    log.info("teacher seed=%d top1=%.2f", seed, acc)
    return model, acc, path


def train_scratch_student(cfg: DistillConfig, train: Dataset, test: Dataset, seed: int) -> float:
    """The label-only student under the same init and data order as distillation runs."""
    torch.manual_seed(seed)
    model = build_net(cfg, cfg.student_hidden, train)
    return train_supervised(model, cfg, train, test, seed)


def load_teachers(paths: Sequence[str | Path]) -> list[nn.Module]:
    teachers = [load_checkpoint(p) for p in paths]
    if not teachers:
        raise ConfigError("at least one teacher checkpoint is required")
    c = {t.num_classes for t in teachers}
    d = {tuple(t.feature_shape) for t in teachers}
    if len(c) != 1 or len(d) != 1:
        raise ConfigError(f"teachers disagree on classes {c} or feature shapes {d}")
    return teachers


# -- distillation -------------------------------------------------------------------

def _freeze(teachers: Sequence[nn.Module]) -> None:
    for t in teachers:
        t.eval()
        for p in t.parameters():
            p.requires_grad_(False)


@torch.no_grad()
def _teacher_table(teachers, inputs: torch.Tensor, chunk: int = 2048) -> list[BatchOutput]:
    outs = []
    for t in teachers:
        parts = [t(inputs[i:i + chunk]) for i in range(0, inputs.shape[0], chunk)]
        outs.append(BatchOutput(torch.cat([p.logits for p in parts]), torch.cat([p.features for p in parts])))
    return outs


def _split_holdout(train: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng([seed, 29]).permutation(len(train))
    n_val = max(1, int(round(fraction * len(train))))
    val, rest = perm[:n_val], np.sort(perm[n_val:])
    sub = lambda idx, split: Dataset(train.inputs[idx], train.labels[idx], train.num_classes, split,  # noqa: E731
                                     train.mean, train.std)
    return sub(rest, "train"), sub(val, "holdout")


def distill_run(cfg: DistillConfig, teachers: Sequence[nn.Module], train: Dataset, test: Dataset,
                seed: int, out_dir: str | Path | None = None, name: str | None = None) -> RunResult:
    """One distillation run under ``cfg`` for a single seed."""
    cfg.validate()
    strategy = cfg.strategy_kind
    name = name or strategy.value
    teachers = list(teachers)
    _freeze(teachers)
    if any(t.num_classes != train.num_classes for t in teachers):
        raise ConfigError("teacher class count does not match the dataset")
    t_shape = tuple(teachers[0].feature_shape)
    if any(tuple(t.feature_shape) != t_shape for t in teachers):
        raise ConfigError("teachers must share the penultimate feature shape")

    holdout = None
    if cfg.holdout:
        train, holdout = _split_holdout(train, cfg.holdout_fraction, seed)

    torch.manual_seed(seed)
    student = build_net(cfg, cfg.student_hidden, train)
    align = AlignmentMap(student.feature_shape, t_shape)
    opt, sched = _optimizer(cfg, [*student.parameters(), *align.parameters()])

    k = len(teachers)
    settings = bilevel.InnerSettings.from_config(cfg)
    meta = meta_opt = None
    if strategy is Strategy.MMKD:
        meta = MetaWeightNet(train.num_classes, k, cfg.batch_size,
                             normalize_similarity=cfg.normalize_similarity)
        meta_opt = bilevel.make_meta_optimizer(meta, cfg.meta_lr)

    if holdout is not None:
        buffer: HardBuffer = HoldoutBuffer(torch.from_numpy(holdout.inputs), torch.from_numpy(holdout.labels))
    elif cfg.no_hard_buffer:
        buffer = ReplayBuffer(cfg.buffer_capacity, seed=seed)
    else:
        buffer = HardBuffer(cfg.buffer_capacity)
    inner_rng = np.random.default_rng([seed, 11])
    eval_rng = np.random.default_rng([seed, 13])

    table = _teacher_table(teachers, torch.from_numpy(train.inputs))
    plan = BatchPlan(cfg.batch_size, seed)
    result = RunResult(name, seed)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = {"L_CE": 0.0, "L_f": 0.0, "L_r": 0.0, "L_total": 0.0}
        n_batches = 0
        for x_np, y_np, ids_np in batches(train, plan, epoch):
            student.train()
            x, y, ids = torch.from_numpy(x_np), torch.from_numpy(y_np), torch.from_numpy(ids_np)
            t_out = [BatchOutput(o.logits[ids], o.features[ids]) for o in table]
            s_out = student(x)
            aligned = align(s_out.features)
            if meta is not None:
                with torch.no_grad():
                    w_r, w_f = bilevel.meta_weights(meta, s_out, t_out, settings)
            else:
                w_r, w_f = fixed_weights(strategy, t_out, y, cfg.tau)
            losses = distill_losses(s_out, aligned, t_out, y, w_r, w_f,
                                    cfg.effective_alpha, cfg.beta, cfg.tau)
            _check_finite(losses.L_total, "L_total")
            _clipped_step(cfg, opt, losses.L_total)
            step += 1

            vals = losses.as_floats()
            for key in sums:
                sums[key] += vals[key]
            n_batches += 1
            result.step_rows.append({"step": step, "epoch": epoch, **vals,
                                     "alpha_L_f": cfg.effective_alpha * vals["L_f"]})

            buffer.rescore(student)
            buffer.update(x, y, score_difficulty(student, x, y), ids)

            if meta is not None and step % cfg.meta_period == 0:
                _outer(cfg, student, align, teachers, buffer, meta, meta_opt, settings,
                       opt.param_groups[0]["lr"], inner_rng, eval_rng, result, step)
        sched.step()
        top1 = evaluate(student, test)
        row = {key: v / max(n_batches, 1) for key, v in sums.items()}
        row.update(epoch=epoch, test_top1=top1, buffer_min_difficulty=buffer.min_difficulty,
                   meta_updates=result.meta_updates,
                   wall_clock_s=time.perf_counter() - t0 if cfg.record_wall_clock else float("nan"))
        result.rows.append(row)
        log.info("%s seed=%d epoch=%d L_total=%.4f top1=%.2f", name, seed, epoch, row["L_total"], top1)
    result.final_top1 = evaluate(student, test)
    result.wall_clock_s = time.perf_counter() - t0

    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "metrics" / f"{name}-{seed}.csv", METRIC_COLUMNS, result.rows)
        save_checkpoint(out / "student" / f"{name}-{seed}.ckpt", student, {"test_top1": result.final_top1})
        save_checkpoint(out / "student" / f"{name}-align-{seed}.ckpt", align)
        if meta is not None:
            save_checkpoint(out / "meta" / f"{name}-{seed}.ckpt", meta)
            write_csv(out / "metrics" / f"{name}-meta-{seed}.csv", META_COLUMNS, result.meta_rows)
        if cfg.log_steps:
            write_csv(out / "metrics" / f"{name}-steps-{seed}.csv", STEP_COLUMNS, result.step_rows)
        if cfg.dump_buffer:
            buffer.dump_csv(out / "metrics" / f"{name}-buffer-{seed}.csv")
    return result


def _outer(cfg, student, align, teachers, buffer, meta, meta_opt, settings, lr,
           inner_rng, eval_rng, result: RunResult, step: int) -> None:
    if len(buffer) < cfg.batch_size and cfg.inner_steps > 0:
        result.skipped_meta_updates += 1
        return
    try:
        diag = bilevel.outer_update(student, align, teachers, buffer, meta, meta_opt, cfg.inner_steps,
                                    settings, lr, inner_rng, eval_rng)
    except BufferNotReady:
        result.skipped_meta_updates += 1
        return
    except bilevel.HypergradientError as exc:
        log.warning("outer update at step %d aborted: %s", step, exc)
        result.skipped_meta_updates += 1
        return
    result.meta_updates += 1
    result.meta_rows.append({"step": step, "outer_ce_before": diag.outer_ce_before,
                             "outer_ce_after": diag.outer_ce_after,
                             "hypergrad_norm": diag.hypergrad_norm,
                             "mean_entropy_wr": diag.mean_entropy_wr})


def distill(cfg: DistillConfig, teachers: Sequence[nn.Module], train: Dataset, test: Dataset,
            out_dir: str | Path | None = None, name: str | None = None) -> TrainReport:
    """Distillation over every seed in ``cfg.seeds``; writes a summary when ``out_dir`` is set."""
    name = name or cfg.strategy_kind.value
    t0 = time.perf_counter()
    runs = [distill_run(cfg, teachers, train, test, s, out_dir, name) for s in cfg.seeds]
    mean, std = summarize([r.final_top1 for r in runs])
    report = TrainReport(name, runs, mean, std, time.perf_counter() - t0)
    if out_dir is not None:
        write_summary(Path(out_dir) / f"summary-{name}.csv", [report])
        (Path(out_dir) / f"report-{name}.json").write_text(json.dumps(report_dict(report), indent=2))
        if cfg.plot:
            from .plotting import plot_learning_curves
            plot_learning_curves(report, Path(out_dir) / f"curves-{name}.png")
    return report


def report_dict(report: TrainReport) -> dict:
    return {"name": report.name, "mean_top1": report.mean_top1, "std_top1": report.std_top1,
            "wall_clock_s": report.wall_clock_s,
            "runs": [{"seed": r.seed, "final_top1": r.final_top1, "meta_updates": r.meta_updates,
                      "skipped_meta_updates": r.skipped_meta_updates, "wall_clock_s": r.wall_clock_s,
                      "epochs": r.rows} for r in report.runs]}


def write_summary(path: Path, reports: Sequence[TrainReport]) -> Path:
    """Per-seed rows followed by one ``mean`` row per report (``std`` alongside)."""
    rows = []
    for rep in reports:
        for r in rep.runs:
            rows.append({"name": rep.name, "seed": r.seed, "top1": r.final_top1, "std": ""})
        rows.append({"name": rep.name, "seed": "mean", "top1": rep.mean_top1, "std": rep.std_top1})
    return write_csv(path, ["name", "seed", "top1", "std"], rows)
