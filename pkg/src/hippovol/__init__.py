"""Hippocampus segmentation and longitudinal volumetry pipeline."""

__version__ = "0.1.0"

from .imaging import (  # noqa: F401
    AXES,
    BinaryMask3D,
    VoxelGrid,
    extract_slice,
    load_volume,
    reassemble_volume,
    save_volume,
)
from .datasets import DatasetRecipe, SampleSet, SliceSample, build_dataset, split_dataset  # noqa: F401
from .losses import LossConfig, combined_loss, dice_score, iou_score, soft_dice_loss  # noqa: F401
from .models import ModelConfig, build_model, count_parameters  # noqa: F401
from .postprocess import PostprocessConfig, continuity_metric, remove_small_components  # noqa: F401
from .longitudinal import TimelineAnalysis, TimePointVolume, compute_volume, fit_timeline  # noqa: F401
from .synthetic import PhantomSpec, generate_phantom_subject  # noqa: F401
from .training import TrainConfig, train, validate  # noqa: F401
