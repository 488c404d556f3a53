"""Command-line entry point: ``mitosis-mtl {synth,train,lodo,eval}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import config as config_mod
from .config import ExperimentConfig, load_config
from .data import SampleStore, SynthSpec, generate_synthetic, load_manifest, materialize
from .errors import InvalidConfig, MitosisError, UndefinedClassRate, VersionMismatch
from .inference import evaluate, write_report
from .model import load_checkpoint, read_checkpoint_config
from .training import FoldSpec, plan_lodo_folds, train_fold, write_fold_outputs

PROG = "mitosis-mtl"
ERROR_PREFIX = f"{PROG}: error:"
MODEL_ROWS = {True: "MTL", False: "Single task"}

log = logging.getLogger(PROG)


# -- data ---------------------------------------------------------------------------


def open_dataset(cfg: ExperimentConfig) -> SampleStore:
    if cfg.data.synthetic:
        manifest, samples = generate_synthetic(cfg.data.synth_spec(), cfg.data.seed)
        return SampleStore(manifest, samples)
    return SampleStore(load_manifest(cfg.data.manifest))


def cmd_synth(args) -> int:
    spec = SynthSpec(args.domains, args.per_domain, args.atypical_ratio, args.patch_size)
    manifest, samples = generate_synthetic(spec, args.seed)
    written = materialize(manifest, samples, args.out, jobs=args.jobs)
    print(f"wrote {len(written.samples)} samples in {len(written.domains)} domains to {Path(args.out) / 'manifest.txt'}")
    return 0


# -- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldOutcome:
    fold: int
    test_domain: str
    multitask: bool
    best_epoch: int
    balanced_accuracy: float | None


def fold_dir(cfg: ExperimentConfig, fold: int, multitask: bool) -> Path:
    d = cfg.experiment_dir / f"fold-{fold}"
    return d if multitask else d / "single-task"


def run_fold(cfg: ExperimentConfig, fold: FoldSpec, multitask: bool, store: SampleStore | None = None) -> FoldOutcome:
    """Train one fold, write its artifacts and score the test domain.

    Runs with one intra-op thread so results do not depend on how many folds
    share the machine.
    """
    torch.set_num_threads(1)
    try:
        store = store or open_dataset(cfg)
        train_cfg = dataclasses.replace(cfg.train, multitask=multitask)
        result = train_fold(store, fold, cfg.model, train_cfg, cfg.aug, cfg.loss)
        out = fold_dir(cfg, fold.index, multitask)
        write_fold_outputs(result, out, {"multitask": multitask, "experiment": cfg.name})
        report, preds = evaluate(
            [(f"fold-{fold.index}", result.best_model)],
            store,
            domains=[fold.test_domain],
            tta=cfg.inference.tta,
            batch_size=cfg.inference.batch_size,
        )
        write_report(report, out, preds)
    except MitosisError as exc:
        exc.fold_context = f"fold {fold.index} (test domain {fold.test_domain}, {MODEL_ROWS[multitask]})"
        raise
    return FoldOutcome(fold.index, fold.test_domain, multitask, result.best_epoch, report.domain_balanced_accuracy(fold.test_domain))


def _run_all(cfg: ExperimentConfig, jobs: list[tuple[FoldSpec, bool]], store: SampleStore) -> list[FoldOutcome]:
    if cfg.jobs == 1:
        return [run_fold(cfg, f, mt, store) for f, mt in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=ctx) as pool:
        futures = [pool.submit(run_fold, cfg, f, mt) for f, mt in jobs]
        return [fut.result() for fut in futures]


def summarize(values: Sequence[float | None]) -> tuple[float, float] | None:
    """Mean and population std over the defined values."""
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    arr = np.asarray(defined, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_table(outcomes: Sequence[FoldOutcome]) -> str:
    variants = [mt for mt in (False, True) if any(o.multitask == mt for o in outcomes)]
    folds = sorted({(o.fold, o.test_domain) for o in outcomes})
    by_key = {(o.fold, o.multitask): o for o in outcomes}
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"

    header = ["fold", "test_domain", *(MODEL_ROWS[mt] for mt in variants)]
    rows = [[str(k), d, *(fmt(by_key[(k, mt)].balanced_accuracy) for mt in variants)] for k, d in folds]
    stats = {mt: summarize([by_key[(k, mt)].balanced_accuracy for k, _ in folds]) for mt in variants}
    rows.append(["mean±std", "", *("n/a" if stats[mt] is None else f"{stats[mt][0]:.4f}±{stats[mt][1]:.4f}" for mt in variants)])
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()

    out = ["# test-domain balanced accuracy per fold", line(header), *map(line, rows), ""]
    out.append("# summary over folds")
    out.append("model        balanced_accuracy (mean±std)")
    for mt in variants:
        s = stats[mt]
        out.append(f"{MODEL_ROWS[mt]:<12} {'n/a' if s is None else f'{s[0]:.4f}±{s[1]:.4f}'}")
    return "\n".join(out) + "\n"


def cmd_lodo(args) -> int:
    cfg = _config_from_args(args)
    store = open_dataset(cfg)
    folds = plan_lodo_folds(store.manifest.domains)
    if args.folds:
        folds = [f for f in folds if f.index in set(args.folds)]
    variants = [False, True] if args.ablation else [True]
    jobs = [(f, mt) for f in folds for mt in variants]
    cfg.experiment_dir.mkdir(parents=True, exist_ok=True)
    (cfg.experiment_dir / "config.txt").write_text(cfg.to_text(runtime=False))
    outcomes = _run_all(cfg, jobs, store)
    table = format_table(outcomes)
    (cfg.experiment_dir / "results.txt").write_text(table)
    (cfg.experiment_dir / "results.json").write_text(
        json.dumps([dataclasses.asdict(o) for o in outcomes], indent=2) + "\n"
    )
    sys.stdout.write(table)
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    store = open_dataset(cfg)
    folds = plan_lodo_folds(store.manifest.domains)
    if not 0 <= args.fold < len(folds):
        raise InvalidConfig(f"fold must lie in [0, {len(folds) - 1}], got {args.fold}")
    multitask = not args.single_task
    cfg.experiment_dir.mkdir(parents=True, exist_ok=True)
    outcome = run_fold(cfg, folds[args.fold], multitask, store)
    ba = "n/a" if outcome.balanced_accuracy is None else f"{outcome.balanced_accuracy:.4f}"
    print(
        f"fold {outcome.fold} ({MODEL_ROWS[multitask]}): best epoch {outcome.best_epoch}, "
        f"test domain {outcome.test_domain} balanced accuracy {ba}"
    )
    print(f"artifacts in {fold_dir(cfg, outcome.fold, multitask)}")
    return 0


# -- evaluation ----------------------------------------------------------------------


def check_ensemble_configs(paths: Sequence[str]) -> None:
    """All members must share one architecture; the init seed may differ."""
    first = None
    for p in paths:
        _, cfg = read_checkpoint_config(p)
        arch = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
        if first is None:
            first = (p, arch)
        elif arch != first[1]:
            raise VersionMismatch(f"model config of {p} ({arch}) differs from {first[0]} ({first[1]})")


def cmd_eval(args) -> int:
    check_ensemble_configs(args.ensemble)
    models = [(Path(p).parent.name + "/" + Path(p).name, load_checkpoint(p)) for p in args.ensemble]
    cfg = _config_from_args(args)
    store = open_dataset(cfg)
    try:
        report, preds = evaluate(
            models, store, domains=args.domains or None, tta=cfg.inference.tta, batch_size=cfg.inference.batch_size
        )
    except UndefinedClassRate as exc:
        raise UndefinedClassRate(f"{exc}; choose domains that contain both classes") from exc
    sys.stdout.write(report.to_text())
    if args.out:
        write_report(report, args.out, preds)
    return 0


# -- argument parsing --------------------------------------------------------------------


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key; repeatable")
    p.add_argument("--name", help="experiment name")
    p.add_argument("--output-dir", help=f"artifact root (default ${config_mod.OUTPUT_ENV} or ./{config_mod.DEFAULT_OUTPUT})")
    p.add_argument("--manifest", help="dataset manifest; disables the synthetic generator")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--tta", choices=["on", "off"])
    p.add_argument("--jobs", type=int, help="worker processes; results do not depend on it")


def _config_from_args(args) -> ExperimentConfig:
    overrides = config_mod.parse_assignments(args.set, "--set")
    flag_map = {
        "name": args.name,
        "output_dir": args.output_dir,
        "train.epochs": args.epochs,
        "train.seed": args.seed,
        "jobs": args.jobs,
        "inference.tta": args.tta,
    }
    if args.manifest:
        flag_map["data.manifest"] = args.manifest
        flag_map["data.synthetic"] = "false"
    overrides.update({k: str(v) for k, v in flag_map.items() if v is not None})
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Multi-task atypical mitosis classifier")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-domain dataset")
    p.add_argument("--domains", type=int, default=7)
    p.add_argument("--per-domain", type=int, default=40)
    p.add_argument("--atypical-ratio", type=float, default=0.25)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a single leave-one-domain-out fold")
    _add_experiment_args(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--single-task", action="store_true", help="classification loss only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lodo", help="run the full leave-one-domain-out protocol")
    _add_experiment_args(p)
    p.add_argument("--ablation", action="store_true", help="also train the single-task baseline")
    p.add_argument("--folds", type=int, nargs="+", help="restrict to these fold indices")
    p.set_defaults(func=cmd_lodo)

    p = sub.add_parser("eval", help="evaluate a checkpoint ensemble")
    _add_experiment_args(p)
    p.add_argument("--ensemble", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--domains", nargs="+", help="restrict to these domains")
    p.add_argument("--out", help="directory for report.txt, report.json and predictions.csv")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MitosisError as exc:
        context = getattr(exc, "fold_context", None)
        where = f" {context}:" if context else ""
        print(f"{ERROR_PREFIX}{where} {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
