"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 train real models and take most of the run time (roughly
50 minutes on one CPU core); the others finish in seconds.
"""

import json
import time

import numpy as np
import pytest
import torch

from mitosis_mtl.augmentation import DIHEDRAL_GROUP, apply_dihedral
from mitosis_mtl.cli import main as cli_main
from mitosis_mtl.data import SampleStore, SynthSpec, generate_synthetic
from mitosis_mtl.inference import Confusion, balanced_accuracy, evaluate, predict_tta
from mitosis_mtl.losses import ClassWeights, dice_loss, weighted_bce
from mitosis_mtl.model import ModelConfig, build_model, prune_auxiliary
from mitosis_mtl.training import TrainConfig, plan_lodo_folds, train_fold

from oracles import balanced_accuracy_brute, bce_one, dice_one
from test_losses import gradient_check

# Desk-scale training settings; see the README for why the learning rate
# differs from the library default.
TOY_LR = 1e-3
STUDY_SEEDS = range(5)
STUDY_CONFIG = """\
name = study-seed{seed}
data.n_domains = 7
data.per_domain = 40
data.patch_size = 32
data.seed = {seed}
model.input_size = 32
model.stem_channels = 8
model.stage_channels = 8,16,32,64
model.cls_hidden = 32,16
model.seed = {seed}
train.epochs = 50
train.learning_rate = 1e-3
train.batch_size = 24
train.seed = {seed}
"""


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_gradient_check(verdict):
    start = time.perf_counter()
    checks = [gradient_check(seed) for seed in range(20)]
    elapsed = time.perf_counter() - start
    worst = max(c[0] for c in checks)
    worst_element = max(c[1] for c in checks)
    verdict(
        1, worst < 1e-4 and elapsed < 60,
        f"max relative error {worst:.2e} per gradient tensor ({worst_element:.2e} element-wise, "
        f"near-zero entries) over 20 batches in {elapsed:.1f}s",
    )


def test_criterion_2_loss_oracles(verdict):
    rng = np.random.default_rng(2)
    worst_bce = 0.0
    for _ in range(1000):
        logit = float(rng.normal(0, 4))
        label = int(rng.integers(0, 2))
        w = ClassWeights(*rng.uniform(0.1, 5.0, 2))
        got = float(weighted_bce(torch.tensor([logit], dtype=torch.float64), torch.tensor([float(label)], dtype=torch.float64), w))
        worst_bce = max(worst_bce, abs(got - bce_one(logit, label, w.w_typical, w.w_atypical)))

    worst_dice, lo, hi = 0.0, 1.0, 0.0
    for _ in range(1000):
        c, h, w = (int(v) for v in rng.integers(1, 5, 3))
        probs = rng.uniform(size=(1, c, h, w))
        target = (rng.uniform(size=(1, c, h, w)) < rng.uniform()).astype(np.float64)
        got = float(dice_loss(torch.from_numpy(probs), torch.from_numpy(target)))
        worst_dice = max(worst_dice, abs(got - dice_one(probs[0].tolist(), target[0].tolist())))
        lo, hi = min(lo, got), max(hi, got)
    ok = worst_bce < 1e-6 and worst_dice < 1e-6 and lo >= 0.0 and hi <= 1.0
    verdict(2, ok, f"bce max |diff| {worst_bce:.1e}, dice max |diff| {worst_dice:.1e}, dice range [{lo:.4f}, {hi:.4f}]")


def test_criterion_3_pruning_equivalence(verdict):
    model = build_model(ModelConfig()).eval()
    pruned = prune_auxiliary(model)
    gen = torch.Generator().manual_seed(3)
    mismatches = 0
    with torch.no_grad():
        for _ in range(100):
            x = torch.rand(1, 3, 64, 64, generator=gen)
            mismatches += not torch.equal(pruned(x), model(x).cls_logit)
    verdict(3, mismatches == 0, f"{100 - mismatches}/100 inputs bit-equal")


def test_criterion_4_tta_invariance(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(20):
        cfg = ModelConfig(input_size=32, stem_channels=8, stage_channels=(8, 16, 32, 64), cls_hidden=(32, 16), seed=i)
        model = prune_auxiliary(build_model(cfg).eval())
        patch = rng.uniform(size=(3, 32, 32)).astype(np.float32)
        base = predict_tta(model, patch)
        for t in DIHEDRAL_GROUP:
            worst = max(worst, abs(predict_tta(model, apply_dihedral(patch, t)) - base))
    verdict(4, worst <= 1e-5, f"max deviation {worst:.2e} over 20 patches x 8 transforms")


def test_criterion_5_lodo_planner(verdict):
    failures = []
    for n in range(3, 11):
        domains = [f"x{i}" for i in range(n)]
        folds = plan_lodo_folds(domains)
        tests = sorted(f.test_domain for f in folds)
        vals = sorted(f.val_domain for f in folds)
        partitions = all(
            sorted([*f.train_domains, f.val_domain, f.test_domain]) == sorted(domains) for f in folds
        )
        if tests != sorted(domains) or vals != sorted(domains) or not partitions:
            failures.append(n)
    verdict(5, not failures, "D=3..10 exhaustive" + (f", failing D={failures}" if failures else ""))


def _toy_run():
    """Criterion 6 setup: fold 0 of the default 7x40 synthetic set at 64x64."""
    manifest, samples = generate_synthetic(SynthSpec(), seed=0)
    store = SampleStore(manifest, samples)
    fold = plan_lodo_folds(manifest.domains)[0]
    start = time.perf_counter()
    result = train_fold(store, fold, ModelConfig(), TrainConfig(epochs=50, learning_rate=TOY_LR, seed=0))
    report, _ = evaluate([("toy", result.best_model)], store, domains=[fold.test_domain])
    return result, report.to_text(), time.perf_counter() - start


@pytest.fixture(scope="module")
def toy_run():
    return _toy_run()


def test_criterion_6_training_sanity(verdict, toy_run):
    result, _, elapsed = toy_run
    first, last = result.epochs[0].train.total, result.epochs[-1].train.total
    vals = [r.val.total for r in result.epochs]
    argmin = min(range(len(vals)), key=lambda i: (vals[i], i)) + 1
    ok = last <= 0.5 * first and result.best_epoch == argmin and elapsed < 15 * 60
    verdict(
        6, ok,
        f"train loss {first:.4f} -> {last:.4f} (ratio {last / first:.3f}), "
        f"best epoch {result.best_epoch} vs argmin {argmin}, {elapsed / 60:.1f} min",
    )


def test_criterion_7_domain_shift_study(verdict, tmp_path):
    start = time.perf_counter()
    per_seed = {"MTL": [], "Single task": []}
    for seed in STUDY_SEEDS:
        cfg = tmp_path / f"seed{seed}.cfg"
        cfg.write_text(STUDY_CONFIG.format(seed=seed))
        assert cli_main(["lodo", "--config", str(cfg), "--output-dir", str(tmp_path / "runs"), "--ablation"]) == 0
        outcomes = json.loads((tmp_path / "runs" / f"study-seed{seed}" / "results.json").read_text())
        for name, mt in (("MTL", True), ("Single task", False)):
            per_seed[name].append(float(np.mean([o["balanced_accuracy"] for o in outcomes if o["multitask"] == mt])))
    elapsed = time.perf_counter() - start
    mtl, single = float(np.mean(per_seed["MTL"])), float(np.mean(per_seed["Single task"]))
    ok = mtl >= single - 0.02 and mtl >= 0.70 and single >= 0.70 and elapsed < 60 * 60
    verdict(
        7, ok,
        f"MTL {mtl:.4f} vs single task {single:.4f} over {len(STUDY_SEEDS)} seeds "
        f"(per seed MTL {[round(v, 4) for v in per_seed['MTL']]}, "
        f"single {[round(v, 4) for v in per_seed['Single task']]}), {elapsed / 60:.1f} min",
    )


def test_criterion_8_determinism(verdict, toy_run):
    first, first_report, _ = toy_run
    second, second_report, _ = _toy_run()
    same_ckpt = first.best_checkpoint == second.best_checkpoint
    same_report = first_report == second_report
    same_losses = [r.loss_row() for r in first.epochs] == [r.loss_row() for r in second.epochs]
    verdict(8, same_ckpt and same_report and same_losses,
            f"checkpoint identical={same_ckpt}, report identical={same_report}, epoch losses identical={same_losses}")


def test_criterion_9_metric_oracle(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(1000):
        pos, neg = (int(v) for v in rng.integers(1, 60, 2))
        tp, tn = int(rng.integers(0, pos + 1)), int(rng.integers(0, neg + 1))
        truth = [1] * pos + [0] * neg
        pred = [1] * tp + [0] * (pos - tp) + [0] * tn + [1] * (neg - tn)
        order = rng.permutation(len(truth))
        truth, pred = [truth[i] for i in order], [pred[i] for i in order]
        c = Confusion()
        for t, p in zip(truth, pred):
            c.add(t, p)
        mismatches += balanced_accuracy(c) != balanced_accuracy_brute(truth, pred)
    verdict(9, mismatches == 0, f"{1000 - mismatches}/1000 confusion matrices match exactly")
