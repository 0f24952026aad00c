"""Overlap metrics and training losses.

Dice = 2|A∩B| / (|A|+|B|) is the primary metric; IoU = |A∩B| / |A∪B| is
exposed separately. Both return 1.0 when pred and target are both empty.
Losses operate on torch tensors and are differentiable; metrics operate
on plain binary arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PROB_EPS = 1e-7  # BCE clamp bound


@dataclass
class LossConfig:
    kind: str = "dice_bce"
    bce_weight: float = 0.5
    smooth: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("dice", "dice_bce"):
            raise ValueError(f"kind must be 'dice' or 'dice_bce', got {self.kind!r}")
        if not 0.0 <= self.bce_weight <= 1.0:
            raise ValueError(f"bce_weight must be in [0, 1], got {self.bce_weight}")
        if self.smooth <= 0:
            raise ValueError(f"smooth must be > 0, got {self.smooth}")

    @property
    def effective_bce_weight(self) -> float:
        return 0.0 if self.kind == "dice" else self.bce_weight


def _as_binary(arr, name):
    arr = np.asarray(arr)
    if not ((arr == 0) | (arr == 1)).all():
        raise ValueError(f"{name} must be strictly binary")
    return arr.astype(np.float64)


def dice_score(pred, target) -> float:
    """2|A∩B|/(|A|+|B|) over binary masks of any (matching) shape."""
    pred = _as_binary(pred, "pred")
    target = _as_binary(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    total = pred.sum() + target.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (pred * target).sum() / total)


def iou_score(pred, target) -> float:
    """|A∩B|/|A∪B|; the overlap formula as printed, kept alongside Dice."""
    pred = _as_binary(pred, "pred")
    target = _as_binary(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    union = np.maximum(pred, target).sum()
    if union == 0:
        return 1.0
    return float((pred * target).sum() / union)


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """1 - (2 Σpt + ε) / (Σp + Σt + ε), summed over the whole tensor."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    target = target.to(probs.dtype)
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + target.sum() + smooth)


def bce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy; probabilities clamped away from 0 and 1."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    target = target.to(probs.dtype)
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def combined_loss(probs: torch.Tensor, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """w * BCE + (1-w) * soft Dice; w = 0 for the pure-Dice config."""
    w = config.effective_bce_weight
    dice = soft_dice_loss(probs, target, config.smooth)
    if w == 0.0:
        return dice
    return w * bce_loss(probs, target) + (1.0 - w) * dice


def deep_supervision_loss(head_probs, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Unweighted mean of combined_loss over supervision heads."""
    heads = list(head_probs)
    if not heads:
        raise ValueError("deep_supervision_loss needs at least one head")
    total = combined_loss(heads[0], target, config)
    for h in heads[1:]:
        total = total + combined_loss(h, target, config)
    return total / len(heads)


def batch_sample_loss(probs: torch.Tensor, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Mean over batch samples of the per-sample combined loss (N x 1 x H x W)."""
    losses = [combined_loss(probs[i], target[i], config) for i in range(probs.shape[0])]
    return torch.stack(losses).mean()


def slice_dice_at_threshold(probs: torch.Tensor, target: torch.Tensor, threshold: float = 0.5):
    """Per-sample Dice of thresholded predictions; returns a list of floats."""
    pred = (probs > threshold).to(torch.uint8).cpu().numpy()
    tgt = target.cpu().numpy().astype(np.uint8)
    return [dice_score(pred[i], tgt[i]) for i in range(pred.shape[0])]
