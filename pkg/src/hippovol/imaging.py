"""3D volumes, binary masks, slicing and reassembly.

Axis convention (fixed, not inferred from any affine): the stored array
order of a volume is (axis 0, axis 1, axis 2) = (sagittal, coronal, axial).
Slice index i along an axis is plain array indexing along that axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nifti import read_nifti, write_nifti

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def resolve_axis(axis) -> int:
    """Accept 'sagittal'/'coronal'/'axial' or 0/1/2."""
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}, expected one of {sorted(AXES)}") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"axis index must be 0, 1 or 2, got {axis}")
    return axis


@dataclass
class VoxelGrid:
    """3D scalar volume with voxel spacing (mm) and subject/timepoint identity."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    subject_id: str = ""
    timepoint_years: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or any(d < 1 for d in self.data.shape):
            raise ValueError(f"VoxelGrid needs a 3D array with all dims >= 1, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive mm values, got {self.spacing}")
        if not np.isfinite(np.asarray(self.data, dtype=np.float64)).all():
            raise ValueError("volume contains NaN or Inf")
        if self.timepoint_years < 0:
            raise ValueError(f"timepoint_years must be >= 0, got {self.timepoint_years}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class BinaryMask3D:
    """3D {0,1} mask with the spacing of its source grid."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    subject_id: str = ""
    timepoint_years: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"BinaryMask3D needs a 3D array, got shape {self.data.shape}")
        if not ((self.data == 0) | (self.data == 1)).all():
            raise ValueError(
                f"mask values must be exactly 0 or 1, found {np.unique(self.data)[:8]}"
            )
        self.data = self.data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive mm values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def load_volume(path, subject_id: str = "", timepoint_years: float = 0.0) -> VoxelGrid:
    """Load a 3D NIfTI-1 volume; intensities cast to float32, spacing from pixdim."""
    data, spacing = read_nifti(path)
    data = data.astype(np.float32)
    if not np.isfinite(data).all():
        raise ValueError(f"{path}: volume contains NaN or Inf after load")
    return VoxelGrid(data=data, spacing=spacing, subject_id=subject_id, timepoint_years=timepoint_years)


def save_volume(grid_or_mask, path) -> None:
    """Write a VoxelGrid (float32) or BinaryMask3D (uint8) as NIfTI-1."""
    if isinstance(grid_or_mask, BinaryMask3D):
        write_nifti(path, grid_or_mask.data.astype(np.uint8), grid_or_mask.spacing)
    elif isinstance(grid_or_mask, VoxelGrid):
        write_nifti(path, grid_or_mask.data.astype(np.float32), grid_or_mask.spacing)
    else:
        raise TypeError(f"expected VoxelGrid or BinaryMask3D, got {type(grid_or_mask).__name__}")


def extract_slice(grid, axis, index: int) -> np.ndarray:
    """Return a copy of the 2D plane at `index` along `axis` (see module docstring)."""
    ax = resolve_axis(axis)
    data = grid.data if isinstance(grid, (VoxelGrid, BinaryMask3D)) else np.asarray(grid)
    extent = data.shape[ax]
    if not 0 <= index < extent:
        raise IndexError(f"slice index {index} out of range for axis {ax} with extent {extent}")
    return np.take(data, index, axis=ax).copy()


def reassemble_volume(slices, axis, reference: VoxelGrid) -> BinaryMask3D:
    """Stack ordered 2D binary arrays back into a 3D mask shaped like `reference`."""
    ax = resolve_axis(axis)
    extent = reference.shape[ax]
    slices = [np.asarray(s) for s in slices]
    if len(slices) != extent:
        raise ValueError(f"need {extent} slices for axis {ax}, got {len(slices)}")
    plane_shape = tuple(d for i, d in enumerate(reference.shape) if i != ax)
    for i, s in enumerate(slices):
        if s.shape != plane_shape:
            raise ValueError(f"slice {i} has shape {s.shape}, expected {plane_shape}")
    stacked = np.stack(slices, axis=ax)
    return BinaryMask3D(
        data=stacked,
        spacing=reference.spacing,
        subject_id=reference.subject_id,
        timepoint_years=reference.timepoint_years,
    )
