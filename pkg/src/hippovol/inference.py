"""Whole-volume prediction: slice, forward, undo the size mode, reassemble."""

from __future__ import annotations

import numpy as np
import torch

from .datasets import (
    DatasetRecipe,
    apply_size_mode,
    extract_adjacent_stack,
    extract_same_slice_stack,
    invert_size_mode,
    normalize_volume,
)
from .imaging import BinaryMask3D, VoxelGrid, resolve_axis
from .losses import dice_score, iou_score
from .postprocess import PostprocessConfig, apply_postprocess, continuity_metric
from .training import final_map


def predict_probabilities(model, grid: VoxelGrid, recipe: DatasetRecipe, batch_size: int = 16) -> np.ndarray:
    """Per-voxel foreground probabilities for every slice along the recipe axis.

    Intensities are min-max normalized per volume, exactly as in dataset
    construction; regions a crop never saw come back as probability 0.
    """
    ax = resolve_axis(recipe.axis)
    norm = VoxelGrid(
        data=normalize_volume(grid.data),
        spacing=grid.spacing,
        subject_id=grid.subject_id,
        timepoint_years=grid.timepoint_years,
    )
    extent = norm.data.shape[ax]
    plane_shape = tuple(d for i, d in enumerate(norm.data.shape) if i != ax)

    stacks = []
    for idx in range(extent):
        if recipe.variant == "stacked":
            stack = extract_adjacent_stack(norm, idx, recipe.axis)
        else:
            stack = extract_same_slice_stack(norm, idx, recipe.axis)
        stacks.append(
            np.stack([apply_size_mode(c, recipe.size_mode) for c in stack], axis=0).astype(np.float32)
        )

    model.eval()
    prob_planes = []
    with torch.no_grad():
        for start in range(0, extent, batch_size):
            batch = torch.from_numpy(np.stack(stacks[start : start + batch_size]))
            probs = final_map(model(batch))[:, 0].cpu().numpy()
            for p in probs:
                prob_planes.append(invert_size_mode(p, recipe.size_mode, plane_shape))
    volume = np.stack(prob_planes, axis=ax).astype(np.float32)
    # bilinear resize inversion can overshoot [0, 1] by float error
    return np.clip(volume, 0.0, 1.0)


def predict_mask(
    model,
    grid: VoxelGrid,
    recipe: DatasetRecipe,
    post_config: PostprocessConfig,
    roi_box=None,
    batch_size: int = 16,
) -> BinaryMask3D:
    """Predict, threshold and post-process a scan into a 3D mask."""
    probs = predict_probabilities(model, grid, recipe, batch_size)
    mask = apply_postprocess(probs, post_config, roi_box=roi_box)
    return BinaryMask3D(
        data=mask,
        spacing=grid.spacing,
        subject_id=grid.subject_id,
        timepoint_years=grid.timepoint_years,
    )


def evaluate_mask(pred: BinaryMask3D, truth: BinaryMask3D, axis="sagittal") -> dict:
    """Volume Dice/IoU, mean slice Dice along the axis, and continuity."""
    if pred.data.shape != truth.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {truth.data.shape}")
    ax = resolve_axis(axis)
    slice_dices = [
        dice_score(np.take(pred.data, i, axis=ax), np.take(truth.data, i, axis=ax))
        for i in range(pred.data.shape[ax])
    ]
    return {
        "dice_volume": dice_score(pred.data, truth.data),
        "dice_slice_mean": float(np.mean(slice_dices)),
        "iou_volume": iou_score(pred.data, truth.data),
        "continuity": continuity_metric(pred.data, axis=ax),
    }
