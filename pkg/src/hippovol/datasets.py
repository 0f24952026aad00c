"""2D training-sample construction from 3D scan/label pairs.

Three channel variants (same_slice, stacked, center_crop), two label
variants (center, collapsed), three canonical sizes (pad256, resize128,
crop96), plus subject-level train/val/test splitting and on-disk
persistence of sample sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import VoxelGrid, extract_slice, resolve_axis

VARIANTS = ("same_slice", "stacked", "center_crop")
SIZE_MODES = ("pad256", "resize128", "crop96")
LABEL_MODES = ("center", "collapsed")

SIZE_OF_MODE = {"pad256": 256, "resize128": 128, "crop96": 96}


@dataclass
class DatasetRecipe:
    variant: str = "stacked"
    size_mode: str = "crop96"
    label_mode: str = "center"
    slices_per_scan: int = 32
    axis: str = "sagittal"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.size_mode not in SIZE_MODES:
            raise ValueError(f"size_mode must be one of {SIZE_MODES}, got {self.size_mode!r}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.variant == "center_crop" and self.size_mode != "crop96":
            raise ValueError("variant 'center_crop' requires size_mode 'crop96'")
        if self.slices_per_scan < 1:
            raise ValueError(f"slices_per_scan must be > 0, got {self.slices_per_scan}")
        resolve_axis(self.axis)


@dataclass
class SliceSample:
    image: np.ndarray  # (3, H, W) float32
    label: np.ndarray  # (H, W) uint8
    subject_id: str
    timepoint_years: float
    slice_index: int
    recipe: DatasetRecipe

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample image must be (3, H, W), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ValueError(
                f"label shape {self.label.shape} does not match image plane {self.image.shape[1:]}"
            )
        if not np.isfinite(self.image).all():
            raise ValueError("sample image contains NaN or Inf")
        if not ((self.label == 0) | (self.label == 1)).all():
            raise ValueError("sample label must be strictly binary")


@dataclass
class SampleSet:
    samples: list
    recipe: DatasetRecipe

    def __post_init__(self):
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise ValueError(f"samples disagree on shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subject_ids(self):
        return sorted({s.subject_id for s in self.samples})


def normalize_volume(data: np.ndarray) -> np.ndarray:
    """Per-volume min-max normalization to [0, 1]; constant volumes map to 0."""
    data = np.asarray(data, dtype=np.float32)
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def _clamped_slice(grid, axis, index: int) -> np.ndarray:
    extent = grid.data.shape[resolve_axis(axis)]
    return extract_slice(grid, axis, min(max(index, 0), extent - 1))


def extract_same_slice_stack(grid: VoxelGrid, index: int, axis="sagittal") -> np.ndarray:
    """3-channel image: the slice at `index` repeated three times."""
    plane = extract_slice(grid, axis, index)
    return np.stack([plane, plane, plane], axis=0)


def extract_adjacent_stack(grid: VoxelGrid, index: int, axis="sagittal") -> np.ndarray:
    """3-channel image: slices (index-1, index, index+1), edge-replicated at bounds."""
    extract_slice(grid, axis, index)  # range check on the center index
    return np.stack(
        [
            _clamped_slice(grid, axis, index - 1),
            _clamped_slice(grid, axis, index),
            _clamped_slice(grid, axis, index + 1),
        ],
        axis=0,
    )


def make_label(grid_label: VoxelGrid, index: int, label_mode: str, axis="sagittal") -> np.ndarray:
    """1-channel binary label: the center slice, or the union of slices index-1..index+1."""
    if not ((grid_label.data == 0) | (grid_label.data == 1)).all():
        raise ValueError("label volume must be strictly binary")
    if label_mode == "center":
        out = extract_slice(grid_label, axis, index)
    elif label_mode == "collapsed":
        extract_slice(grid_label, axis, index)
        out = np.maximum(
            np.maximum(_clamped_slice(grid_label, axis, index - 1), _clamped_slice(grid_label, axis, index)),
            _clamped_slice(grid_label, axis, index + 1),
        )
    else:
        raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")
    return out.astype(np.uint8)


def pad_to_256(image2d: np.ndarray) -> np.ndarray:
    """Center the image in a zero 256x256 canvas; original pixels unchanged."""
    image2d = np.asarray(image2d)
    h, w = image2d.shape
    if h > 256 or w > 256:
        raise ValueError(f"pad_to_256 needs both dims <= 256, got {image2d.shape}")
    top, left = (256 - h) // 2, (256 - w) // 2
    out = np.zeros((256, 256), dtype=image2d.dtype)
    out[top : top + h, left : left + w] = image2d
    return out


def unpad_from_256(image2d: np.ndarray, original_hw) -> np.ndarray:
    """Inverse of pad_to_256: crop the centered original_hw window back out."""
    h, w = original_hw
    top, left = (256 - h) // 2, (256 - w) // 2
    return np.asarray(image2d)[top : top + h, left : left + w].copy()


def resize_to_128(image2d: np.ndarray, is_label: bool = False) -> np.ndarray:
    """Resize to 128x128: bilinear for images, nearest-neighbor for labels."""
    return _resize(image2d, (128, 128), is_label)


def _resize(image2d: np.ndarray, out_hw, is_label: bool) -> np.ndarray:
    image2d = np.asarray(image2d)
    t = torch.from_numpy(np.ascontiguousarray(image2d, dtype=np.float32))[None, None]
    if is_label:
        out = F.interpolate(t, size=out_hw, mode="nearest-exact")
        return out[0, 0].numpy().astype(image2d.dtype)
    out = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    return out[0, 0].numpy().astype(np.float32)


def center_crop_96(image2d: np.ndarray) -> np.ndarray:
    """Centered 96x96 window; odd margins break toward the lower index."""
    image2d = np.asarray(image2d)
    h, w = image2d.shape
    if h < 96 or w < 96:
        raise ValueError(f"center_crop_96 needs both dims >= 96, got {image2d.shape}")
    top, left = (h - 96) // 2, (w - 96) // 2
    return image2d[top : top + 96, left : left + 96].copy()


def uncrop_96(image2d: np.ndarray, original_hw) -> np.ndarray:
    """Inverse of center_crop_96: paste into a zero canvas of original_hw."""
    h, w = original_hw
    top, left = (h - 96) // 2, (w - 96) // 2
    out = np.zeros((h, w), dtype=np.asarray(image2d).dtype)
    out[top : top + 96, left : left + 96] = image2d
    return out


def apply_size_mode(plane2d: np.ndarray, size_mode: str, is_label: bool = False) -> np.ndarray:
    if size_mode == "pad256":
        return pad_to_256(plane2d)
    if size_mode == "resize128":
        return resize_to_128(plane2d, is_label=is_label)
    if size_mode == "crop96":
        return center_crop_96(plane2d)
    raise ValueError(f"size_mode must be one of {SIZE_MODES}, got {size_mode!r}")


def invert_size_mode(plane2d: np.ndarray, size_mode: str, original_hw) -> np.ndarray:
    """Map a processed plane (e.g. a probability map) back to the original in-plane shape.

    Regions outside a crop come back as zeros; resize inversion is bilinear.
    """
    if size_mode == "pad256":
        return unpad_from_256(plane2d, original_hw)
    if size_mode == "resize128":
        return _resize(plane2d, tuple(original_hw), is_label=False)
    if size_mode == "crop96":
        return uncrop_96(plane2d, original_hw)
    raise ValueError(f"size_mode must be one of {SIZE_MODES}, got {size_mode!r}")


def _slice_window(extent: int, slices_per_scan: int) -> range:
    start = extent // 2 - slices_per_scan // 2
    end = start + slices_per_scan
    if start < 0 or end > extent:
        raise ValueError(
            f"scan extent {extent} too small for a centered window of {slices_per_scan} slices"
        )
    return range(start, end)


def build_dataset(scans, recipe: DatasetRecipe) -> SampleSet:
    """Build recipe.slices_per_scan samples per scan from (grid, label) pairs.

    The window is a contiguous block centered on the mid-slice; intensities
    are min-max normalized per volume before slicing.
    """
    samples = []
    for grid, label in scans:
        if grid.data.shape != label.data.shape:
            raise ValueError(
                f"scan/label shape mismatch for {grid.subject_id!r}: "
                f"{grid.data.shape} vs {label.data.shape}"
            )
        norm = VoxelGrid(
            data=normalize_volume(grid.data),
            spacing=grid.spacing,
            subject_id=grid.subject_id,
            timepoint_years=grid.timepoint_years,
        )
        extent = norm.data.shape[resolve_axis(recipe.axis)]
        for idx in _slice_window(extent, recipe.slices_per_scan):
            if recipe.variant == "stacked":
                stack = extract_adjacent_stack(norm, idx, recipe.axis)
            else:  # same_slice and center_crop both use repeated slices
                stack = extract_same_slice_stack(norm, idx, recipe.axis)
            lab = make_label(label, idx, recipe.label_mode, recipe.axis)
            image = np.stack(
                [apply_size_mode(c, recipe.size_mode) for c in stack], axis=0
            ).astype(np.float32)
            lab = apply_size_mode(lab, recipe.size_mode, is_label=True).astype(np.uint8)
            samples.append(
                SliceSample(
                    image=image,
                    label=lab,
                    subject_id=grid.subject_id,
                    timepoint_years=grid.timepoint_years,
                    slice_index=idx,
                    recipe=recipe,
                )
            )
    return SampleSet(samples=samples, recipe=recipe)


def split_dataset(sample_set: SampleSet, ratios, seed: int):
    """Split by subject into (train, val, test); all slices of a subject stay together."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    subjects = sample_set.subject_ids()
    if len(subjects) < 3:
        raise ValueError(f"need at least 3 subjects to split, got {len(subjects)}")

    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]

    n = len(subjects)
    counts = [int(np.floor(r * n)) for r in ratios]
    fracs = np.array([r * n - c for r, c in zip(ratios, counts)])
    for i in np.argsort(-fracs, kind="stable")[: n - sum(counts)]:
        counts[i] += 1
    if any(c == 0 for c in counts):
        raise ValueError(f"split {ratios} of {n} subjects leaves an empty part ({counts})")

    groups = []
    pos = 0
    for c in counts:
        groups.append(set(order[pos : pos + c]))
        pos += c
    return tuple(
        SampleSet(samples=[s for s in sample_set if s.subject_id in g], recipe=sample_set.recipe)
        for g in groups
    )


def save_sample_set(sample_set: SampleSet, out_dir) -> Path:
    """Persist as one .npz per sample plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(sample_set):
        name = f"sample_{i:05d}.npz"
        np.savez(out_dir / name, image=s.image, label=s.label)
        entries.append(
            {
                "file": name,
                "subject_id": s.subject_id,
                "timepoint_years": s.timepoint_years,
                "slice_index": s.slice_index,
            }
        )
    manifest = {"recipe": asdict(sample_set.recipe), "samples": entries}
    path = out_dir / "samples.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_sample_set(in_dir) -> SampleSet:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "samples.json").read_text())
    recipe = DatasetRecipe(**manifest["recipe"])
    samples = []
    for e in manifest["samples"]:
        arrays = np.load(in_dir / e["file"])
        samples.append(
            SliceSample(
                image=arrays["image"],
                label=arrays["label"],
                subject_id=e["subject_id"],
                timepoint_years=e["timepoint_years"],
                slice_index=e["slice_index"],
                recipe=recipe,
            )
        )
    return SampleSet(samples=samples, recipe=recipe)
