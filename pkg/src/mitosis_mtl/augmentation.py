"""Geometric (dihedral) and stain augmentation.

Dihedral transforms are exact pixel permutations, so they can be applied to
patches and masks alike without interpolation. Stain augmentation perturbs the
patch in optical-density space and never touches masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import NonSquareInput, SingularMatrix

EPS_IMG = 1e-6

# Ruifrok & Johnston H, E and DAB optical-density vectors, rows normalised
RUIFROK_HED = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
RUIFROK_HED = RUIFROK_HED / np.linalg.norm(RUIFROK_HED, axis=1, keepdims=True)


class DihedralTransform(NamedTuple):
    rotation: int  # clockwise quarter turns
    flip: bool  # horizontal flip, applied after the rotation


DIHEDRAL_GROUP: tuple[DihedralTransform, ...] = tuple(
    DihedralTransform(k, f) for f in (False, True) for k in range(4)
)
IDENTITY = DihedralTransform(0, False)


def apply_dihedral(x, t: DihedralTransform):
    """Rotate by ``t.rotation`` clockwise quarter turns, then optionally mirror
    left-right. Works on numpy arrays and torch tensors with the two spatial
    axes last.
    """
    if x.shape[-1] != x.shape[-2]:
        raise NonSquareInput(f"dihedral transforms need square inputs, got {tuple(x.shape[-2:])}")
    k = t.rotation % 4
    if isinstance(x, torch.Tensor):
        out = torch.rot90(x, -k, dims=(-2, -1)) if k else x
        return torch.flip(out, dims=(-1,)) if t.flip else out
    out = np.rot90(x, -k, axes=(-2, -1)) if k else x
    if t.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def inverse(t: DihedralTransform) -> DihedralTransform:
    # mirror-then-rotate elements are involutions
    if t.flip:
        return t
    return DihedralTransform((-t.rotation) % 4, False)


def compose(first: DihedralTransform, second: DihedralTransform) -> DihedralTransform:
    """The single transform equal to applying ``first`` then ``second``."""
    if not first.flip:
        return DihedralTransform((first.rotation + second.rotation) % 4, second.flip)
    # R^b F R^a = F R^(a-b), since a mirror conjugates a rotation to its inverse
    rot = (first.rotation - second.rotation) % 4
    return DihedralTransform(rot, not second.flip)


@dataclass(frozen=True)
class AugConfig:
    sigma_alpha: float = 0.05
    sigma_beta: float = 0.01
    enable_stain: bool = True
    enable_dihedral: bool = True


@dataclass(frozen=True)
class StainParams:
    alpha: np.ndarray
    beta: np.ndarray
    od_matrix: np.ndarray = RUIFROK_HED

    @classmethod
    def identity(cls) -> "StainParams":
        return cls(np.ones(3), np.zeros(3))


def stain_augment(patch: np.ndarray, params: StainParams) -> np.ndarray:
    """Jitter stain concentrations: S' = alpha * S + beta, with S = M @ OD."""
    m = np.asarray(params.od_matrix, dtype=np.float64)
    if abs(np.linalg.det(m)) < 1e-12:
        raise SingularMatrix("stain od_matrix is not invertible")
    m_inv = np.linalg.inv(m)
    x = np.clip(np.asarray(patch, dtype=np.float64), EPS_IMG, 1.0)
    c, h, w = x.shape
    od = -np.log(x).reshape(3, -1)
    stains = m @ od
    stains = np.asarray(params.alpha)[:, None] * stains + np.asarray(params.beta)[:, None]
    od_new = m_inv @ stains
    out = np.clip(np.exp(-od_new), 0.0, 1.0).reshape(c, h, w)
    return out.astype(np.asarray(patch).dtype if np.asarray(patch).dtype.kind == "f" else np.float64)


def sample_training_augmentation(
    rng: np.random.Generator, cfg: AugConfig = AugConfig()
) -> tuple[DihedralTransform, StainParams]:
    t = DIHEDRAL_GROUP[int(rng.integers(8))]
    alpha = rng.uniform(1.0 - cfg.sigma_alpha, 1.0 + cfg.sigma_alpha, 3)
    beta = rng.uniform(-cfg.sigma_beta, cfg.sigma_beta, 3)
    return t, StainParams(alpha, beta)


def augment_sample(patch, binary_mask, pixel_class_map, rng: np.random.Generator, cfg: AugConfig):
    """Draw one augmentation and apply it jointly to a patch and its masks.

    Draws happen even for disabled parts so the rng stream does not depend on
    which augmentations are switched on.
    """
    t, stain = sample_training_augmentation(rng, cfg)
    if cfg.enable_stain:
        patch = stain_augment(patch, stain)
    if cfg.enable_dihedral:
        patch = apply_dihedral(patch, t)
        binary_mask = apply_dihedral(binary_mask, t)
        pixel_class_map = apply_dihedral(pixel_class_map, t)
    return patch, binary_mask, pixel_class_map
