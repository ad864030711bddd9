"""Focal, soft dice, combo and class-weighted overall losses.

All losses take probabilities (after the sigmoid), not logits. Inputs are
``(..., H, W)`` tensors; every leading index is one image. Each loss is
reduced per image over its non-ignored pixels and then averaged over images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .ingest import IGNORE

CLAMP = 1e-7
DICE_EPS = 1.0


@dataclass
class LossWeights:
    gamma: float = 2.0
    w_focal: float = 1.0
    w_dice: float = 1.0
    w_class: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    clamp: float = CLAMP
    dice_eps: float = DICE_EPS

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if len(self.w_class) != 5:
            raise ValueError("need one class weight per output channel")
        self.w_class = tuple(float(w) for w in self.w_class)


def weights_from_frequencies(f) -> np.ndarray:
    """Inverse-frequency class weights ``1 / f_c``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(~(f > 0)):
        raise ValueError(f"class frequencies must be positive, got {f.tolist()}")
    return 1.0 / f


def targets_from_labels(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Label rasters ``(B, H, W)`` to binary targets ``(B, 5, H, W)`` and an ignore mask.

    Channels 0..3 are damage classes 1..4, channel 4 is building presence.
    """
    labels = labels.long()
    ignore = labels == IGNORE
    y = torch.stack([labels == c for c in range(1, 5)] + [(labels >= 1) & ~ignore], dim=-3)
    return y, ignore


def _keep(p, ignore):
    if ignore is None:
        return torch.ones_like(p)
    return (~ignore.bool()).to(p.dtype).expand_as(p)


def focal_loss(p: torch.Tensor, y: torch.Tensor, gamma: float = 2.0, ignore=None, clamp: float = CLAMP):
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    keep = _keep(p, ignore)
    n = keep.sum(dim=(-2, -1))
    if torch.any(n == 0):
        raise ValueError("focal loss over an image with no non-ignored pixels")
    y = y.to(p.dtype)
    p = p.clamp(clamp, 1 - clamp)
    pt = y * p + (1 - y) * (1 - p)
    term = -(1 - pt).pow(gamma) * torch.log(pt) if gamma else -torch.log(pt)
    per_image = (term * keep).sum(dim=(-2, -1)) / n
    return per_image.mean()


def dice_loss(p: torch.Tensor, y: torch.Tensor, ignore=None, eps: float = DICE_EPS):
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    keep = _keep(p, ignore)
    y = y.to(p.dtype) * keep
    p = p * keep
    inter = (y * p).sum(dim=(-2, -1))
    denom = y.sum(dim=(-2, -1)) + p.sum(dim=(-2, -1))
    per_image = 1 - (2 * inter + eps) / (denom + eps)
    return per_image.mean()


def combo_loss(p, y, weights: LossWeights = LossWeights(), ignore=None):
    total = 0.0
    if weights.w_focal:
        total = total + weights.w_focal * focal_loss(p, y, weights.gamma, ignore, weights.clamp)
    if weights.w_dice:
        total = total + weights.w_dice * dice_loss(p, y, ignore, weights.dice_eps)
    return total


@dataclass
class LossBreakdown:
    total: torch.Tensor
    focal: list = field(default_factory=list)
    dice: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {"loss": float(self.total.detach())}
        for c, (f, di) in enumerate(zip(self.focal, self.dice), start=1):
            d[f"focal_{c}"] = float(torch.as_tensor(f).detach())
            d[f"dice_{c}"] = float(torch.as_tensor(di).detach())
        return d


def overall_loss(p: torch.Tensor, y: torch.Tensor, weights: LossWeights = LossWeights(), ignore=None,
                 breakdown: bool = False):
    """Sum over the 5 channels of ``w_class[c] * combo(P_c, Y_c)``.

    ``p`` and ``y`` are ``(B, 5, H, W)`` (or ``(5, H, W)``); ``ignore`` is the
    matching ``(B, H, W)`` mask shared by all channels.
    """
    if p.shape != y.shape or p.shape[-3] != 5:
        raise ValueError(f"expected matching (..., 5, H, W) tensors, got {tuple(p.shape)}, {tuple(y.shape)}")
    ig = None if ignore is None else ignore.unsqueeze(-3).expand(p.shape)
    total = p.new_zeros(())
    focal, dice = [], []
    for c in range(5):
        pc, yc = p.select(-3, c), y.select(-3, c)
        igc = None if ig is None else ig.select(-3, c)
        f = focal_loss(pc, yc, weights.gamma, igc, weights.clamp)
        d = dice_loss(pc, yc, igc, weights.dice_eps)
        total = total + weights.w_class[c] * (weights.w_focal * f + weights.w_dice * d)
        focal.append(f.detach())
        dice.append(d.detach())
    if breakdown:
        return LossBreakdown(total, focal, dice)
    return total
