"""Training objective: class-weighted BCE for the image label plus soft Dice
for the two dense tasks, summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .data import Label
from .errors import EmptyClass, ShapeMismatch

EPS_DICE = 1.0
EPS_PROB = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    w_typical: float
    w_atypical: float


@dataclass(frozen=True)
class LossConfig:
    eps_dice: float = EPS_DICE
    eps_prob: float = EPS_PROB
    coefficients: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class LossBreakdown:
    """Per-task terms (already scaled by their coefficients) and their sum.

    Fields hold 0-dim tensors during training; :meth:`item` converts to floats.
    """

    l_cls: torch.Tensor
    l_seg: torch.Tensor
    l_pix: torch.Tensor
    total: torch.Tensor

    @classmethod
    def from_terms(cls, l_cls, l_seg, l_pix) -> "LossBreakdown":
        return cls(l_cls, l_seg, l_pix, l_cls + l_seg + l_pix)

    def item(self) -> "LossBreakdown":
        return LossBreakdown.from_terms(float(self.l_cls), float(self.l_seg), float(self.l_pix))


def compute_class_weights(counts: Mapping[Label, int]) -> ClassWeights:
    """Inverse-frequency weights N / (2 n_c); their sample-weighted mean is 1."""
    n_t, n_a = int(counts.get(Label.TYPICAL, 0)), int(counts.get(Label.ATYPICAL, 0))
    if n_t < 1 or n_a < 1:
        raise EmptyClass(f"both classes need at least one sample, got typical={n_t}, atypical={n_a}")
    n = n_t + n_a
    return ClassWeights(n / (2 * n_t), n / (2 * n_a))


def weighted_bce(
    logits: torch.Tensor, labels: torch.Tensor, weights: ClassWeights, eps_prob: float = EPS_PROB
) -> torch.Tensor:
    """Mean class-weighted BCE; ``labels`` is 1 for atypical, 0 for typical."""
    p = torch.sigmoid(logits).clamp(eps_prob, 1.0 - eps_prob)
    y = labels.to(p.dtype)
    loss = -weights.w_atypical * y * torch.log(p) - weights.w_typical * (1.0 - y) * torch.log1p(-p)
    return loss.mean()


def dice_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    classes: tuple[int, ...] | None = None,
    eps: float = EPS_DICE,
) -> torch.Tensor:
    """Soft Dice loss on (B, C, H, W) probabilities and one-hot targets.

    Dice is computed per sample and per class, averaged over ``classes`` (all
    channels when None), subtracted from 1, then averaged over the batch.
    """
    if probs.shape != target.shape or probs.ndim != 4:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if classes is not None:
        probs = probs[:, list(classes)]
        target = target[:, list(classes)]
    target = target.to(probs.dtype)
    inter = (probs * target).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + target.sum(dim=(2, 3))
    dice = (2.0 * inter + eps) / (denom + eps)
    return (1.0 - dice.mean(dim=1)).mean()


def composite_loss(
    out,
    labels: torch.Tensor,
    binary_masks: torch.Tensor | None,
    class_maps: torch.Tensor | None,
    weights: ClassWeights,
    cfg: LossConfig = LossConfig(),
    multitask: bool = True,
) -> LossBreakdown:
    """Sum of the three task losses.

    ``out`` is a :class:`~mitosis_mtl.model.ForwardOutput`. With
    ``multitask=False`` only the classification term is computed and the
    dense terms are zero.
    """
    c_cls, c_seg, c_pix = cfg.coefficients
    l_cls = c_cls * weighted_bce(out.cls_logit, labels, weights, cfg.eps_prob)
    if not multitask:
        zero = torch.zeros((), dtype=l_cls.dtype)
        return LossBreakdown.from_terms(l_cls, zero, zero)
    if out.seg_logits.shape != binary_masks.shape:
        raise ShapeMismatch(f"seg logits {tuple(out.seg_logits.shape)} vs mask {tuple(binary_masks.shape)}")
    if out.pix_logits.shape[2:] != class_maps.shape[1:] or out.pix_logits.shape[1] != 3:
        raise ShapeMismatch(f"pixel logits {tuple(out.pix_logits.shape)} vs class map {tuple(class_maps.shape)}")
    l_seg = c_seg * dice_loss(torch.sigmoid(out.seg_logits), binary_masks, eps=cfg.eps_dice)
    one_hot = F.one_hot(class_maps.long(), 3).permute(0, 3, 1, 2)
    l_pix = c_pix * dice_loss(torch.softmax(out.pix_logits, dim=1), one_hot, classes=(1, 2), eps=cfg.eps_dice)
    return LossBreakdown.from_terms(l_cls, l_seg, l_pix)
