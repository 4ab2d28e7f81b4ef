"""Command line entry point: ``mmkd <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ABLATION_FLAGS, load_config
from .errors import ConfigError, MMKDError
from .experiments import DEFAULT_BETAS, ablation_suite, ensure_teachers, run_ablation, sweep_beta
from .metrics import ari, evaluate
from .models import load_checkpoint
from .trainer import distill, load_data, load_teachers, train_teacher

log = logging.getLogger("mmkd")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of DistillConfig keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (YAML value syntax; data.* keys allowed)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("--data-dir", type=Path, help="root for idx/cache datasets (else $MMKD_DATA_DIR)")
    p.add_argument("--plot", action="store_true", help="write PNG figures next to the CSVs")


def _distill_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=["aver", "fitnet", "ebkd", "camkd", "mmkd"])
    p.add_argument("--teachers", type=Path, nargs="+", help="teacher checkpoints (default: out-dir/teachers)")
    p.add_argument("--holdout", action="store_true",
                   help="use a held-out split of the training set instead of the hard buffer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmkd", description="Meta-weighted multi-teacher distillation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train label-only teachers for each teacher seed")
    _common(p)

    p = sub.add_parser("distill", help="distill a student over the configured seeds")
    _common(p)
    _distill_flags(p)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true", default=None)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset split")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("ari", help="average relative improvement from accuracy lists")
    p.add_argument("--mmkd", type=_floats, required=True)
    p.add_argument("--baseline", type=_floats, required=True)
    p.add_argument("--student", type=_floats, required=True)

    p = sub.add_parser("sweep", help="beta sweep for mmkd")
    _common(p)
    _distill_flags(p)
    p.add_argument("--betas", type=_floats, default=list(DEFAULT_BETAS))

    p = sub.add_parser("ablate", help="single ablation runs (all four when --flag is omitted)")
    _common(p)
    _distill_flags(p)
    p.add_argument("--flag", choices=ABLATION_FLAGS, action="append",
                   help="ablation(s) to run; each one runs on its own")
    return parser


def _config(args):
    import yaml

    overrides = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(val)
    for key in ("strategy", "holdout", *ABLATION_FLAGS):
        if getattr(args, key, None):
            overrides[key] = getattr(args, key)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.plot:
        overrides["plot"] = True
    return load_config(args.config, overrides)


def _teachers(args, cfg, train, test):
    if args.teachers:
        return load_teachers(args.teachers)
    teachers, accs = ensure_teachers(cfg, train, test, args.out_dir)
    log.info("teachers top-1: %s", ", ".join(f"{a:.2f}" for a in accs))
    return teachers


def _run(args) -> int:
    if args.command == "ari":
        print(f"ARI = {ari(args.mmkd, args.baseline, args.student):.2f}%")
        return 0

    cfg = _config(args)
    train, test = load_data(cfg, args.data_dir)
    out = args.out_dir

    if args.command == "train-teacher":
        seeds = [args.seed] if args.seed is not None else cfg.teacher_seeds
        for seed in seeds:
            _, acc, path = train_teacher(cfg, train, test, seed, out)
            print(f"teacher seed={seed} top1={acc:.2f} -> {path}")
    elif args.command == "eval":
        model = load_checkpoint(args.checkpoint)
        print(f"{args.checkpoint}: top1={evaluate(model, train if args.split == 'train' else test):.2f}")
    elif args.command == "distill":
        teachers = _teachers(args, cfg, train, test)
        name = "-".join([cfg.strategy_kind.value, *cfg.active_ablations])
        report = distill(cfg, teachers, train, test, out, name=name)
        print(f"{name}: top1 {report.mean_top1:.2f} +- {report.std_top1:.2f} over seeds {cfg.seeds}")
    elif args.command == "sweep":
        teachers = _teachers(args, cfg, train, test)
        rows = sweep_beta(cfg, teachers, train, test, args.betas, out)
        for r in rows:
            print(f"beta={r['beta']:g} seed={r['seed']} top1={r['top1']:.2f}")
    elif args.command == "ablate":
        teachers = _teachers(args, cfg, train, test)
        cfg = cfg.replace(strategy="mmkd")
        if args.flag:
            for flag in args.flag:
                rep = run_ablation(cfg.replace(**{flag: True}), teachers, train, test, out)
                print(f"{rep.name}: top1 {rep.mean_top1:.2f} +- {rep.std_top1:.2f}")
        else:
            table = ablation_suite(cfg, teachers, train, test, out)
            for r in table.rows:
                print(f"{r['variant']:>16}: {r['mean_top1']:.2f} +- {r['std_top1']:.2f} "
                      f"({r['delta_vs_full']:+.2f})")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except MMKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:  # missing or unreadable input files
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
