"""Optimisation loop, leave-one-domain-out fold planning and model selection."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augmentation import AugConfig, augment_sample
from .data import Label, Sample, SampleStore
from .errors import InvalidConfig, MissingDomain, ShapeMismatch, SingleClassTraining, TooFewDomains
from .losses import ClassWeights, LossBreakdown, LossConfig, composite_loss, compute_class_weights
from .model import ModelConfig, MultiTaskNet, build_model, checkpoint_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 4e-5
    batch_size: int = 24
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    multitask: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass(frozen=True)
class FoldSpec:
    index: int
    train_domains: tuple[str, ...]
    val_domain: str
    test_domain: str


def plan_lodo_folds(domains: Sequence[str]) -> list[FoldSpec]:
    """One fold per domain: test = domains[i], val = domains[i+1 mod D], train = the rest."""
    domains = list(domains)
    if len(domains) < 3:
        raise TooFewDomains(f"leave-one-domain-out needs at least 3 domains, got {len(domains)}")
    if len(set(domains)) != len(domains):
        raise ValueError("domain ids must be unique")
    folds = []
    n = len(domains)
    for i, test in enumerate(domains):
        val = domains[(i + 1) % n]
        train = tuple(d for d in domains if d not in (test, val))
        folds.append(FoldSpec(i, train, val, test))
    return folds


# -- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[Sequence[torch.Tensor], AdamState]:
    """Bias-corrected Adam update, applied in place to ``params``.

    A ``None`` gradient leaves that parameter and its moments untouched.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2_sqrt = (1.0 - b2**state.step) ** 0.5
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {tuple(g.shape)} vs parameter {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v.sqrt() / bc2_sqrt).add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


# -- training -----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown
    wall_time: float

    def loss_row(self) -> list:
        t, v = self.train, self.val
        return [self.epoch, t.l_cls, t.l_seg, t.l_pix, t.total, v.l_cls, v.l_seg, v.l_pix, v.total]


@dataclass
class FoldResult:
    fold: FoldSpec
    best_epoch: int
    best_model: MultiTaskNet
    best_checkpoint: bytes
    epochs: list[EpochRecord]
    class_weights: ClassWeights


def select_best_epoch(val_losses: Sequence[float]) -> int:
    """1-based epoch with the smallest validation loss; ties go to the earlier epoch."""
    if not val_losses:
        raise ValueError("no validation losses recorded")
    return int(np.argmin(np.asarray(val_losses))) + 1


def _stack(samples: Sequence[Sample]) -> tuple[np.ndarray, ...]:
    return (
        np.stack([s.patch for s in samples]).astype(np.float32),
        np.array([int(s.label) for s in samples], dtype=np.float32),
        np.stack([s.binary_mask for s in samples]).astype(np.float32),
        np.stack([s.pixel_class_map for s in samples]).astype(np.int64),
    )


def _loss_on(model, x, y, masks, maps, weights, loss_cfg, multitask) -> LossBreakdown:
    out = model(x, heads="all" if multitask else "cls")
    return composite_loss(out, y, masks, maps, weights, loss_cfg, multitask=multitask)


def _accumulate(acc: list[float], lb: LossBreakdown, n: int) -> None:
    for i, v in enumerate((lb.l_cls, lb.l_seg, lb.l_pix)):
        acc[i] += float(v.detach()) * n


def evaluate_loss(
    model: MultiTaskNet,
    samples: Sequence[Sample],
    weights: ClassWeights,
    loss_cfg: LossConfig = LossConfig(),
    multitask: bool = True,
    batch_size: int = 24,
) -> LossBreakdown:
    """Per-sample mean loss in inference mode, without augmentation."""
    was_training = model.training
    model.eval()
    arrays = _stack(samples)
    acc = [0.0] * 3
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            x, y, m, c = (torch.from_numpy(a[start : start + batch_size]) for a in arrays)
            _accumulate(acc, _loss_on(model, x, y, m, c, weights, loss_cfg, multitask), len(y))
    model.train(was_training)
    n = len(samples)
    return LossBreakdown.from_terms(*(a / n for a in acc))


def train_fold(
    store: SampleStore,
    fold: FoldSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugConfig = AugConfig(),
    loss_cfg: LossConfig = LossConfig(),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FoldResult:
    """Train one fold and keep the epoch with the lowest validation loss.

    Only training- and validation-domain samples are read from ``store``.
    """
    train_cfg.validate()
    manifest = store.manifest
    for d in (*fold.train_domains, fold.val_domain):
        if d not in manifest.class_counts:
            raise MissingDomain(f"fold {fold.index}: domain {d!r} not in manifest")
    counts = manifest.counts_for(fold.train_domains)
    if counts[Label.TYPICAL] == 0 or counts[Label.ATYPICAL] == 0:
        raise SingleClassTraining(
            f"fold {fold.index}: training domains hold only one class ({counts[Label.TYPICAL]} typical, "
            f"{counts[Label.ATYPICAL]} atypical)"
        )
    weights = compute_class_weights(counts)
    train_samples = store.get_many(manifest.samples_in(fold.train_domains))
    val_samples = store.get_many(manifest.samples_in([fold.val_domain]))

    multitask = train_cfg.multitask
    model = build_model(model_cfg)
    if multitask:
        params = list(model.parameters())
    else:
        params = list(model.encoder.parameters()) + list(model.cls_head.parameters())
    state = AdamState()
    patches, labels, masks, maps = _stack(train_samples)
    n = len(train_samples)

    records: list[EpochRecord] = []
    best_val = float("inf")
    best_epoch, best_state, best_bytes = 0, None, b""
    for epoch in range(1, train_cfg.epochs + 1):
        start_time = time.perf_counter()
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(n)
        model.train()
        acc = [0.0] * 3
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            xb, mb, cb = [], [], []
            for i in idx:
                p, bm, cm = augment_sample(patches[i], masks[i], maps[i], rng, aug_cfg)
                xb.append(p)
                mb.append(bm)
                cb.append(cm)
            x = torch.from_numpy(np.stack(xb).astype(np.float32))
            y = torch.from_numpy(labels[idx])
            m = torch.from_numpy(np.stack(mb).astype(np.float32))
            c = torch.from_numpy(np.stack(cb).astype(np.int64))
            lb = _loss_on(model, x, y, m, c, weights, loss_cfg, multitask)
            grads = torch.autograd.grad(lb.total, params)
            adam_step(params, grads, state, train_cfg.learning_rate, (train_cfg.beta1, train_cfg.beta2), train_cfg.eps)
            _accumulate(acc, lb, len(idx))
        train_loss = LossBreakdown.from_terms(*(a / n for a in acc))
        val_loss = evaluate_loss(model, val_samples, weights, loss_cfg, multitask, train_cfg.batch_size)
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - start_time)
        records.append(rec)
        if val_loss.total < best_val:
            best_val = val_loss.total
            best_epoch = epoch
            model.eval()
            best_state = copy.deepcopy(model.state_dict())
            best_bytes = checkpoint_bytes(model)
        log.info(
            "fold %d epoch %d train %.4f val %.4f", fold.index, epoch, train_loss.total, val_loss.total
        )
        if on_epoch is not None:
            on_epoch(rec)

    assert best_epoch == select_best_epoch([r.val.total for r in records])
    best = build_model(model_cfg)
    best.load_state_dict(best_state)
    best.eval()
    return FoldResult(fold, best_epoch, best, best_bytes, records, weights)


EPOCH_COLUMNS = [
    "epoch",
    "train_cls", "train_seg", "train_pix", "train_total",
    "val_cls", "val_seg", "val_pix", "val_total",
    "wall_time_s",
]


def write_fold_outputs(result: FoldResult, out_dir: str | Path, extra: dict | None = None) -> Path:
    """Write ``epochs.csv``, ``best.ckpt`` and ``fold.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for r in result.epochs:
            w.writerow([*(f"{v:.8f}" if isinstance(v, float) else v for v in r.loss_row()), f"{r.wall_time:.3f}"])
    (out_dir / "best.ckpt").write_bytes(result.best_checkpoint)
    info = {
        "fold": result.fold.index,
        "train_domains": list(result.fold.train_domains),
        "val_domain": result.fold.val_domain,
        "test_domain": result.fold.test_domain,
        "best_epoch": result.best_epoch,
        "best_val_total": result.epochs[result.best_epoch - 1].val.total,
        "class_weights": asdict(result.class_weights),
    }
    if extra:
        info.update(extra)
    (out_dir / "fold.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out_dir / "best.ckpt"
