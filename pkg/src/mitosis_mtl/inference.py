"""Test-time augmentation, ensemble voting and balanced-accuracy reports."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .augmentation import DIHEDRAL_GROUP, IDENTITY, apply_dihedral
from .data import Label, SampleStore
from .errors import EmptyEnsemble, MissingDomain, MixedSampleIds, UndefinedClassRate
from .model import MultiTaskNet, PrunedNet, prune_auxiliary

THRESHOLD = 0.5


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    model_id: str
    p_atypical: float
    predicted: Label
    n_views: int

    @classmethod
    def from_probability(cls, sample_id: str, model_id: str, p: float, n_views: int) -> "PredictionRecord":
        label = Label.ATYPICAL if p >= THRESHOLD else Label.TYPICAL
        return cls(sample_id, model_id, float(p), label, n_views)


@dataclass
class Confusion:
    """Counts with atypical as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, truth: Label, predicted: Label) -> None:
        if truth == Label.ATYPICAL:
            if predicted == Label.ATYPICAL:
                self.tp += 1
            else:
                self.fn += 1
        elif predicted == Label.ATYPICAL:
            self.fp += 1
        else:
            self.tn += 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def balanced_accuracy(c: Confusion) -> float:
    """Mean of sensitivity and specificity."""
    if c.tp + c.fn < 1 or c.tn + c.fp < 1:
        raise UndefinedClassRate(
            f"balanced accuracy undefined: {c.tp + c.fn} atypical and {c.tn + c.fp} typical samples"
        )
    return (c.tp / (c.tp + c.fn) + c.tn / (c.tn + c.fp)) / 2


def _as_pruned(model) -> PrunedNet:
    pruned = prune_auxiliary(model) if isinstance(model, MultiTaskNet) else model
    pruned.eval()
    return pruned


def predict_proba(model, patches, tta: bool = True) -> np.ndarray:
    """P(atypical) per patch for a (B, 3, H, W) batch.

    With ``tta`` the sigmoid outputs of the 8 dihedral views are averaged.
    """
    model = _as_pruned(model)
    x = torch.as_tensor(np.asarray(patches, dtype=np.float32))
    views = DIHEDRAL_GROUP if tta else (IDENTITY,)
    total = torch.zeros(x.shape[0], dtype=torch.float64)
    with torch.no_grad():
        for t in views:
            total += torch.sigmoid(model(apply_dihedral(x, t).contiguous())).double()
    return (total / len(views)).numpy()


def predict_tta(model, patch) -> float:
    return float(predict_proba(model, np.asarray(patch)[None], tta=True)[0])


def ensemble_vote(records: Sequence[PredictionRecord]) -> Label:
    """Majority vote over per-model labels; ties go by mean P(atypical) >= 0.5."""
    if not records:
        raise EmptyEnsemble("no predictions to vote on")
    ids = {r.sample_id for r in records}
    if len(ids) > 1:
        raise MixedSampleIds(f"records mix sample ids {sorted(ids)}")
    n_atypical = sum(r.predicted == Label.ATYPICAL for r in records)
    n_typical = len(records) - n_atypical
    if n_atypical != n_typical:
        return Label.ATYPICAL if n_atypical > n_typical else Label.TYPICAL
    # sorted so the float sum does not depend on record order
    mean_p = sum(sorted(r.p_atypical for r in records)) / len(records)
    return Label.ATYPICAL if mean_p >= THRESHOLD else Label.TYPICAL


@dataclass
class EvalReport:
    ensemble: list[str]
    tta: bool
    config_digest: str
    per_domain: dict[str, Confusion] = field(default_factory=dict)
    overall: Confusion = field(default_factory=Confusion)

    @staticmethod
    def _ba(c: Confusion) -> float | None:
        try:
            return balanced_accuracy(c)
        except UndefinedClassRate:
            return None

    @property
    def balanced_accuracy(self) -> float:
        return balanced_accuracy(self.overall)

    def domain_balanced_accuracy(self, domain: str) -> float | None:
        return self._ba(self.per_domain[domain])

    def to_dict(self) -> dict:
        def block(c: Confusion) -> dict:
            ba = self._ba(c)
            return {
                "samples": c.total, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                "balanced_accuracy": None if ba is None else round(ba, 4),
            }

        return {
            "ensemble": list(self.ensemble),
            "tta": self.tta,
            "config_digest": self.config_digest,
            "domains": {d: block(c) for d, c in self.per_domain.items()},
            "overall": block(self.overall),
        }

    def to_text(self) -> str:
        lines = [
            "# atypical mitosis evaluation report",
            f"ensemble: {' '.join(self.ensemble)}",
            f"tta: {'on' if self.tta else 'off'}",
            f"config_digest: {self.config_digest}",
        ]
        for name, c in [*(("domain " + d, c) for d, c in self.per_domain.items()), ("overall", self.overall)]:
            ba = self._ba(c)
            lines += [
                "",
                f"[{name}]",
                f"samples: {c.total}",
                f"TP: {c.tp}  FP: {c.fp}  TN: {c.tn}  FN: {c.fn}",
                f"balanced_accuracy: {'n/a' if ba is None else f'{ba:.4f}'}",
            ]
        return "\n".join(lines) + "\n"


def config_digest(models: Sequence[tuple[str, torch.nn.Module]], tta: bool) -> str:
    """Short hash of the ensemble ids, model configs, parameters and TTA flag."""
    h = hashlib.sha256()
    h.update(json.dumps({"tta": tta, "models": [mid for mid, _ in models]}).encode())
    for _, m in models:
        cfg = getattr(m, "config", None)
        h.update(json.dumps(cfg.to_dict() if cfg is not None else None, sort_keys=True).encode())
        for name, tensor in m.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def evaluate(
    models: Sequence[tuple[str, object]],
    store: SampleStore,
    domains: Iterable[str] | None = None,
    tta: bool = True,
    batch_size: int = 32,
) -> tuple[EvalReport, list[PredictionRecord]]:
    """Score every selected sample with each model, vote, and tally confusions.

    ``models`` pairs an id with a full or pruned network. Predictions come
    back in manifest order.
    """
    if not models:
        raise EmptyEnsemble("evaluation needs at least one model")
    pruned = [(mid, _as_pruned(m)) for mid, m in models]
    manifest = store.manifest
    wanted = list(manifest.domains if domains is None else domains)
    unknown = [d for d in wanted if d not in manifest.class_counts]
    if unknown:
        raise MissingDomain(f"domain(s) {unknown} not in manifest")
    records = manifest.samples_in(wanted)
    if not records:
        raise UndefinedClassRate(f"no samples in domains {wanted}")
    n_views = 8 if tta else 1

    probs = np.zeros((len(pruned), len(records)))
    for start in range(0, len(records), batch_size):
        chunk = store.get_many(records[start : start + batch_size])
        x = np.stack([s.patch for s in chunk])
        for j, (_, model) in enumerate(pruned):
            probs[j, start : start + len(chunk)] = predict_proba(model, x, tta=tta)

    report = EvalReport(
        ensemble=[mid for mid, _ in pruned],
        tta=tta,
        config_digest=config_digest(pruned, tta),
        per_domain={d: Confusion() for d in wanted},
    )
    predictions: list[PredictionRecord] = []
    for i, rec in enumerate(records):
        votes = [
            PredictionRecord.from_probability(rec.sample_id, mid, probs[j, i], n_views)
            for j, (mid, _) in enumerate(pruned)
        ]
        predictions.extend(votes)
        decided = ensemble_vote(votes)
        report.per_domain[rec.domain].add(rec.label, decided)
        report.overall.add(rec.label, decided)
    balanced_accuracy(report.overall)  # both classes must be present
    return report, predictions


def write_report(report: EvalReport, out_dir: str | Path, predictions: Sequence[PredictionRecord] = ()) -> None:
    """Write ``report.txt``, ``report.json`` and ``predictions.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "model_id", "p_atypical", "predicted", "n_views"])
        for r in predictions:
            w.writerow([r.sample_id, r.model_id, f"{r.p_atypical:.6f}", str(r.predicted), r.n_views])
