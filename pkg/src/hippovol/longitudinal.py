"""Per-subject volume trajectories: OLS slope, RMS error, percent annual change.

Volumes are kept in mm³ throughout; the ml/year table convention is a
derived view (slope / 1000). "Error" is the RMS residual of the fitted
line. Percent annual change is baselined at the fitted value at the
earliest timepoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import BinaryMask3D

STATUSES = ("healthy", "MCI", "AD", "unknown")


@dataclass
class TimePointVolume:
    subject_id: str
    timepoint_years: float
    volume_mm3: float
    source: str = "predicted"  # or "ground_truth"

    def __post_init__(self):
        if self.volume_mm3 < 0:
            raise ValueError(f"volume_mm3 must be >= 0, got {self.volume_mm3}")
        if self.source not in ("predicted", "ground_truth"):
            raise ValueError(f"source must be 'predicted' or 'ground_truth', got {self.source!r}")


@dataclass
class TimelineAnalysis:
    subject_id: str
    slope: float  # mm³/year
    intercept: float  # mm³
    rms_error: float  # mm³
    percent_annual_change: float  # %/year
    n_points: int
    status: str = "unknown"

    @property
    def slope_ml_per_year(self) -> float:
        return self.slope / 1000.0


def compute_volume(mask3d: BinaryMask3D) -> float:
    """Number of 1-voxels times the voxel volume (product of spacings), in mm³."""
    data = np.asarray(mask3d.data)
    if not ((data == 0) | (data == 1)).all():
        raise ValueError("mask must be strictly binary")
    return float(data.sum(dtype=np.int64)) * float(np.prod(mask3d.spacing))


def fit_timeline(points, status: str = "unknown") -> TimelineAnalysis:
    """Ordinary least squares of volume against time for one subject."""
    points = list(points)
    if len(points) < 2:
        raise ValueError(f"need at least 2 timepoints, got {len(points)}")
    subjects = {p.subject_id for p in points}
    if len(subjects) > 1:
        raise ValueError(f"points span multiple subjects: {sorted(subjects)}")
    t = np.array([p.timepoint_years for p in points], dtype=np.float64)
    v = np.array([p.volume_mm3 for p in points], dtype=np.float64)
    if np.ptp(t) == 0:
        raise ValueError("all timepoints are equal (singular design)")

    t_mean, v_mean = t.mean(), v.mean()
    slope = float(((t - t_mean) * (v - v_mean)).sum() / ((t - t_mean) ** 2).sum())
    intercept = float(v_mean - slope * t_mean)
    residuals = v - (slope * t + intercept)
    rms = float(np.sqrt((residuals**2).mean()))
    baseline = intercept + slope * t.min()
    percent = float(100.0 * slope / baseline) if baseline != 0 else float("nan")
    return TimelineAnalysis(
        subject_id=points[0].subject_id,
        slope=slope,
        intercept=intercept,
        rms_error=rms,
        percent_annual_change=percent,
        n_points=len(points),
        status=status,
    )


@dataclass
class BoxStats:
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float


def cohort_slope_stats(analyses) -> dict:
    """Five-number slope summary per status group; quartiles by linear interpolation."""
    analyses = list(analyses)
    if not analyses:
        raise ValueError("no analyses to summarize")
    groups = {}
    for a in analyses:
        groups.setdefault(a.status, []).append(a.slope)
    stats = {}
    for status, slopes in sorted(groups.items()):
        arr = np.asarray(slopes, dtype=np.float64)
        q1, med, q3 = np.percentile(arr, [25, 50, 75], method="linear")
        stats[status] = BoxStats(
            n=len(arr),
            minimum=float(arr.min()),
            q1=float(q1),
            median=float(med),
            q3=float(q3),
            maximum=float(arr.max()),
        )
    return stats


def write_points_csv(points, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject", "timepoint_years", "volume_mm3", "source"])
        for p in points:
            writer.writerow([p.subject_id, f"{p.timepoint_years:.6f}", f"{p.volume_mm3:.6f}", p.source])


def write_timelines_csv(analyses, path) -> None:
    # error column is the RMS residual of the per-subject fit, in mm³
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "subject",
                "status",
                "n_points",
                "slope_mm3_per_year",
                "slope_ml_per_year",
                "intercept_mm3",
                "rms_error_mm3",
                "percent_annual_change",
            ]
        )
        for a in analyses:
            writer.writerow(
                [
                    a.subject_id,
                    a.status,
                    a.n_points,
                    f"{a.slope:.6f}",
                    f"{a.slope_ml_per_year:.9f}",
                    f"{a.intercept:.6f}",
                    f"{a.rms_error:.6f}",
                    f"{a.percent_annual_change:.6f}",
                ]
            )


def write_boxstats_csv(stats: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["status", "n", "min", "q1", "median", "q3", "max"])
        for status, s in stats.items():
            writer.writerow(
                [
                    status,
                    s.n,
                    f"{s.minimum:.6f}",
                    f"{s.q1:.6f}",
                    f"{s.median:.6f}",
                    f"{s.q3:.6f}",
                    f"{s.maximum:.6f}",
                ]
            )


def plot_subject_timeline(points, analysis: TimelineAnalysis, path) -> None:
    """Scatter of per-timepoint volumes with the fitted line, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hippovol"
    points = sorted(points, key=lambda p: p.timepoint_years)
    t = np.array([p.timepoint_years for p in points])
    v = np.array([p.volume_mm3 for p in points])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(t, v, color="tab:blue", label="volume")
    tt = np.linspace(t.min(), t.max(), 2)
    ax.plot(tt, analysis.intercept + analysis.slope * tt, color="tab:red",
            label=f"fit: {analysis.slope:.1f} mm$^3$/yr")
    ax.set_xlabel("time (years)")
    ax.set_ylabel("volume (mm$^3$)")
    ax.set_title(f"{analysis.subject_id} ({analysis.status})")
    ax.legend(loc="best")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
