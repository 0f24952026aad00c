"""Longitudinal phantom subjects with analytically known masks and atrophy.

A subject is a pair of mirrored bright ellipsoids (the bilateral
hippocampi) on a darker, optionally gradient-textured background with
Gaussian noise. The programmed volume decline is linear:
    V(t) = V0 * (1 - annual_shrink_fraction * t).

Voxelization detail: labels are nested level sets of the ellipsoidal
distance field. At each timepoint the scale threshold is chosen so the
voxel count equals round(V0 * (1 - f*t)) exactly (a scaled ellipsoid
pair per timepoint); naive center-inside voxelization at the analytic
scale would leave lattice-quantization noise large enough to corrupt
fitted slopes at this resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import BinaryMask3D, VoxelGrid, save_volume
from .manifests import write_manifest

HIPPOCAMPUS_INTENSITY = 0.8
BACKGROUND_INTENSITY = 0.3
GRADIENT_AMPLITUDE = 0.1
FIT_MARGIN_VOXELS = 4


@dataclass
class PhantomSpec:
    grid_shape: tuple = (64, 96, 112)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_timepoints: int = 2
    annual_shrink_fraction: float = 0.0
    noise_sigma: float = 0.05
    texture: str = "flat"
    seed: int = 0
    subject_id: str = "phantom"
    status: str = "unknown"
    semi_axes: tuple = (6.0, 4.0, 4.0)
    separation: float = 10.0  # ellipsoid center offset from midline, axis 1

    def __post_init__(self):
        self.grid_shape = tuple(int(d) for d in self.grid_shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        if len(self.grid_shape) != 3 or any(d < 1 for d in self.grid_shape):
            raise ValueError(f"grid_shape must be three positive ints, got {self.grid_shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.n_timepoints < 2:
            raise ValueError(f"n_timepoints must be >= 2, got {self.n_timepoints}")
        if not 0.0 <= self.annual_shrink_fraction < 0.2:
            raise ValueError(
                f"annual_shrink_fraction must be in [0, 0.2), got {self.annual_shrink_fraction}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.texture not in ("flat", "smooth_gradient"):
            raise ValueError(f"texture must be 'flat' or 'smooth_gradient', got {self.texture!r}")
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError(f"semi_axes must be positive, got {self.semi_axes}")
        final = 1.0 - self.annual_shrink_fraction * (self.n_timepoints - 1)
        if final <= 0:
            raise ValueError(
                f"programmed shrink empties the structure before the last timepoint "
                f"(final volume factor {final:.3f})"
            )
        for center in self._centers():
            for ax in range(3):
                lo = center[ax] - self.semi_axes[ax]
                hi = center[ax] + self.semi_axes[ax]
                if lo < FIT_MARGIN_VOXELS or hi > self.grid_shape[ax] - 1 - FIT_MARGIN_VOXELS:
                    raise ValueError(
                        f"ellipsoid exceeds grid margin of {FIT_MARGIN_VOXELS} voxels on axis {ax}"
                    )

    def _centers(self):
        cx = (self.grid_shape[0] - 1) / 2.0
        cy = (self.grid_shape[1] - 1) / 2.0
        cz = (self.grid_shape[2] - 1) / 2.0
        return ((cx, cy - self.separation, cz), (cx, cy + self.separation, cz))


def _distance_field(spec: PhantomSpec) -> np.ndarray:
    """Min over the ellipsoid pair of the normalized ellipsoidal distance."""
    idx = np.indices(spec.grid_shape, dtype=np.float64)
    field = None
    for center in spec._centers():
        d = np.sqrt(
            sum(((idx[ax] - center[ax]) / spec.semi_axes[ax]) ** 2 for ax in range(3))
        )
        field = d if field is None else np.minimum(field, d)
    return field


def generate_phantom_subject(spec: PhantomSpec):
    """Return [(scan VoxelGrid, label VoxelGrid, timepoint_years), ...].

    Deterministic per seed; the label geometry is independent of the seed.
    """
    distance = _distance_field(spec)
    flat = distance.ravel()
    order = np.argsort(flat, kind="stable")  # ties resolved by linear index
    v0 = int((flat <= 1.0).sum())
    if v0 == 0:
        raise ValueError("ellipsoids voxelize to an empty label at this resolution")

    if spec.texture == "smooth_gradient":
        ramp = np.linspace(-1.0, 1.0, spec.grid_shape[2])
        background = BACKGROUND_INTENSITY + GRADIENT_AMPLITUDE * ramp[None, None, :]
        background = np.broadcast_to(background, spec.grid_shape).copy()
    else:
        background = np.full(spec.grid_shape, BACKGROUND_INTENSITY)

    rng = np.random.default_rng(spec.seed)
    out = []
    for k in range(spec.n_timepoints):
        t = float(k)
        target = int(round(v0 * (1.0 - spec.annual_shrink_fraction * t)))
        label = np.zeros(flat.shape, dtype=np.uint8)
        label[order[:target]] = 1
        label = label.reshape(spec.grid_shape)

        scan = background.copy()
        scan[label == 1] = HIPPOCAMPUS_INTENSITY
        if spec.noise_sigma > 0:
            scan = scan + rng.normal(0.0, spec.noise_sigma, spec.grid_shape)
        out.append(
            (
                VoxelGrid(
                    data=scan.astype(np.float32),
                    spacing=spec.spacing,
                    subject_id=spec.subject_id,
                    timepoint_years=t,
                ),
                VoxelGrid(
                    data=label.astype(np.float32),
                    spacing=spec.spacing,
                    subject_id=spec.subject_id,
                    timepoint_years=t,
                ),
                t,
            )
        )
    return out


def write_phantom_cohort(specs, out_dir) -> Path:
    """Generate subjects, save scan/label NIfTI pairs, return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for spec in specs:
        for scan, label, t in generate_phantom_subject(spec):
            stem = f"{spec.subject_id}_t{int(t):02d}"
            save_volume(scan, out_dir / f"{stem}_scan.nii.gz")
            # labels go to disk as uint8 masks
            save_volume(
                BinaryMask3D(label.data, label.spacing, spec.subject_id, t),
                out_dir / f"{stem}_label.nii.gz",
            )
            records.append(
                {
                    "subject_id": spec.subject_id,
                    "timepoint_years": t,
                    "status": spec.status,
                    "scan": f"{stem}_scan.nii.gz",
                    "label": f"{stem}_label.nii.gz",
                }
            )
    return write_manifest(records, out_dir / "manifest.json")
