"""Threshold, component filtering, ROI filtering, and slice-continuity scoring.

All functions take and return plain binary uint8 arrays; none of them can
add voxels that were not already set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import dice_score

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=np.uint8)


@dataclass
class PostprocessConfig:
    prob_threshold: float = 0.5
    min_component_voxels: int = 0
    keep_largest_k: int = 2  # bilateral hippocampi
    roi_margin_voxels: int = 0

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError(f"prob_threshold must be in (0, 1), got {self.prob_threshold}")
        for name in ("min_component_voxels", "keep_largest_k", "roi_margin_voxels"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def has_active_component_filter(self) -> bool:
        return self.min_component_voxels > 0 or self.keep_largest_k > 0


def threshold_probabilities(prob_map: np.ndarray, t: float) -> np.ndarray:
    """1 where value > t (strict; ties land at 0), else 0."""
    prob_map = np.asarray(prob_map, dtype=np.float64)
    if prob_map.size and (prob_map.min() < 0.0 or prob_map.max() > 1.0):
        raise ValueError(
            f"probabilities must lie in [0, 1], found range "
            f"[{prob_map.min():.4g}, {prob_map.max():.4g}]"
        )
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    return (prob_map > t).astype(np.uint8)


def _labeled_components(mask: np.ndarray):
    labels, n = ndimage.label(mask, structure=CONNECTIVITY_26)
    if n == 0:
        return labels, np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    # first C-order voxel per component: deterministic tie-break
    uniq, first = np.unique(flat, return_index=True)
    firsts = np.full(n, flat.size, dtype=np.int64)
    for u, f in zip(uniq, first):
        if u > 0:
            firsts[u - 1] = f
    return labels, sizes, firsts


def remove_small_components(mask3d: np.ndarray, config: PostprocessConfig) -> np.ndarray:
    """26-connected filtering: drop components < min_component_voxels, then keep
    only the keep_largest_k largest (0 = keep all); ties broken by lowest
    linear voxel index."""
    mask = np.asarray(mask3d)
    if not ((mask == 0) | (mask == 1)).all():
        raise ValueError("mask must be strictly binary")
    labels, sizes, firsts = _labeled_components(mask)
    if sizes.size == 0:
        return mask.astype(np.uint8)
    keep = np.arange(1, sizes.size + 1)
    if config.min_component_voxels > 0:
        keep = keep[sizes[keep - 1] >= config.min_component_voxels]
    if config.keep_largest_k > 0 and keep.size > config.keep_largest_k:
        order = sorted(keep, key=lambda c: (-sizes[c - 1], firsts[c - 1]))
        keep = np.array(order[: config.keep_largest_k])
    return np.isin(labels, keep).astype(np.uint8)


def roi_filter(mask3d: np.ndarray, roi_box) -> np.ndarray:
    """Drop components whose centroid lies outside the inclusive voxel box.

    roi_box is ((lo0, hi0), (lo1, hi1), (lo2, hi2)).
    """
    mask = np.asarray(mask3d)
    if not ((mask == 0) | (mask == 1)).all():
        raise ValueError("mask must be strictly binary")
    box = [(int(lo), int(hi)) for lo, hi in roi_box]
    if len(box) != 3:
        raise ValueError(f"roi_box needs three (lo, hi) pairs, got {roi_box}")
    for ax, (lo, hi) in enumerate(box):
        if lo > hi:
            raise ValueError(f"degenerate roi_box on axis {ax}: {lo} > {hi}")
        if lo < 0 or hi >= mask.shape[ax]:
            raise ValueError(
                f"roi_box {box[ax]} exceeds volume extent {mask.shape[ax]} on axis {ax}"
            )
    labels, sizes, _ = _labeled_components(mask)
    if sizes.size == 0:
        return mask.astype(np.uint8)
    centroids = ndimage.center_of_mass(mask, labels, index=range(1, sizes.size + 1))
    keep = [
        c + 1
        for c, cen in enumerate(centroids)
        if all(lo <= cen[ax] <= hi for ax, (lo, hi) in enumerate(box))
    ]
    return np.isin(labels, keep).astype(np.uint8)


def derive_roi_box(label_volumes, margin_voxels: int):
    """Union bounding box of all nonzero voxels across volumes, widened by the margin."""
    los, his, shape = None, None, None
    for vol in label_volumes:
        arr = np.asarray(vol)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"label volumes disagree on shape: {arr.shape} vs {shape}")
        nz = np.nonzero(arr)
        if nz[0].size == 0:
            continue
        cur_lo = np.array([a.min() for a in nz])
        cur_hi = np.array([a.max() for a in nz])
        los = cur_lo if los is None else np.minimum(los, cur_lo)
        his = cur_hi if his is None else np.maximum(his, cur_hi)
    if los is None:
        raise ValueError("cannot derive an ROI box: all label volumes are empty")
    return tuple(
        (int(max(lo - margin_voxels, 0)), int(min(hi + margin_voxels, shape[ax] - 1)))
        for ax, (lo, hi) in enumerate(zip(los, his))
    )


def continuity_metric(mask3d: np.ndarray, axis: int = 0) -> float:
    """Mean Dice over adjacent slice pairs where both slices are nonempty.

    Returns 1.0 when no such pair exists (masks with <= 1 nonempty slice).
    """
    mask = np.asarray(mask3d)
    if not ((mask == 0) | (mask == 1)).all():
        raise ValueError("mask must be strictly binary")
    mask = np.moveaxis(mask, axis, 0)
    nonempty = mask.reshape(mask.shape[0], -1).any(axis=1)
    dices = [
        dice_score(mask[i], mask[i + 1])
        for i in range(mask.shape[0] - 1)
        if nonempty[i] and nonempty[i + 1]
    ]
    return float(np.mean(dices)) if dices else 1.0


def apply_postprocess(prob_volume: np.ndarray, config: PostprocessConfig, roi_box=None) -> np.ndarray:
    """Full chain: threshold, component filtering, optional ROI filtering."""
    mask = threshold_probabilities(prob_volume, config.prob_threshold)
    mask = remove_small_components(mask, config)
    if roi_box is not None:
        mask = roi_filter(mask, roi_box)
    return mask
