"""Single JSON run configuration shared by all CLI subcommands.

Sections: seed, paths, phantom, dataset, model, train, loss, postprocess.
Any key can be overridden on the command line with --set section.key=value.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datasets import SIZE_OF_MODE, DatasetRecipe
from .losses import LossConfig
from .models import ModelConfig
from .postprocess import PostprocessConfig
from .synthetic import PhantomSpec
from .training import TrainConfig


@dataclass
class PathsConfig:
    work_dir: str = "runs/default"

    @property
    def work(self) -> Path:
        return Path(self.work_dir)

    @property
    def phantom_dir(self) -> Path:
        return self.work / "phantom"

    @property
    def data_dir(self) -> Path:
        return self.work / "data"

    @property
    def train_dir(self) -> Path:
        return self.work / "train"

    @property
    def predictions_dir(self) -> Path:
        return self.work / "predictions"

    @property
    def analysis_dir(self) -> Path:
        return self.work / "analysis"

    @property
    def metrics_csv(self) -> Path:
        return self.work / "metrics.csv"


@dataclass
class PhantomCohortConfig:
    """Shared phantom settings plus optional per-subject overrides."""

    n_subjects: int = 6
    grid_shape: tuple = (64, 96, 112)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_timepoints: int = 2
    annual_shrink_fraction: float = 0.015
    noise_sigma: float = 0.05
    texture: str = "flat"
    semi_axes: tuple = (6.0, 4.0, 4.0)
    separation: float = 10.0
    status: str = "unknown"
    subjects: list = field(default_factory=list)

    def specs(self, seed: int) -> list:
        shared = dict(
            grid_shape=tuple(self.grid_shape),
            spacing=tuple(self.spacing),
            n_timepoints=self.n_timepoints,
            annual_shrink_fraction=self.annual_shrink_fraction,
            noise_sigma=self.noise_sigma,
            texture=self.texture,
            semi_axes=tuple(self.semi_axes),
            separation=self.separation,
            status=self.status,
        )
        entries = self.subjects or [{} for _ in range(self.n_subjects)]
        specs = []
        for i, entry in enumerate(entries):
            kwargs = dict(shared)
            kwargs.update(entry)
            kwargs.setdefault("subject_id", f"subject_{i:03d}")
            kwargs.setdefault("seed", seed * 1000 + i)
            specs.append(PhantomSpec(**kwargs))
        return specs


@dataclass
class DataConfig:
    recipe: DatasetRecipe = field(default_factory=DatasetRecipe)
    split_ratios: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if isinstance(self.recipe, dict):
            self.recipe = DatasetRecipe(**self.recipe)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomCohortConfig = field(default_factory=PhantomCohortConfig)
    dataset: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def __post_init__(self):
        self.train.loss = self.loss
        self.train.seed = self.seed
        self.validate()

    def validate(self):
        size = SIZE_OF_MODE[self.dataset.recipe.size_mode]
        div = 2 ** (self.model.depth - 1)
        if size % div:
            raise ValueError(
                f"size_mode {self.dataset.recipe.size_mode} ({size}px) is not divisible "
                f"by 2^(depth-1) = {div} for model depth {self.model.depth}"
            )
        if not self.postprocess.has_active_component_filter:
            raise ValueError(
                "postprocess needs min_component_voxels > 0 or keep_largest_k > 0"
            )


_SECTIONS = {
    "paths": PathsConfig,
    "phantom": PhantomCohortConfig,
    "dataset": None,  # special-cased: recipe fields + split_ratios
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "postprocess": PostprocessConfig,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(payload: dict, overrides) -> dict:
    """Apply --set section.key=value entries to the raw JSON payload."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        node = payload
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"--set key {key!r} does not name a config entry")
        node[parts[-1]] = _parse_value(value.strip())
    return payload


def _build_dataset_section(raw: dict) -> DataConfig:
    raw = dict(raw)
    ratios = raw.pop("split_ratios", (0.8, 0.1, 0.1))
    return DataConfig(recipe=DatasetRecipe(**raw), split_ratios=ratios)


def config_from_payload(payload: dict) -> RunConfig:
    unknown = set(payload) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {"seed": int(payload.get("seed", 0))}
    for name, cls in _SECTIONS.items():
        if name not in payload:
            continue
        section = payload[name]
        if not isinstance(section, dict):
            raise ValueError(f"config section {name!r} must be an object")
        if name == "dataset":
            kwargs[name] = _build_dataset_section(section)
        else:
            try:
                kwargs[name] = cls(**section)
            except TypeError as exc:
                raise ValueError(f"config section {name!r}: {exc}") from None
    return RunConfig(**kwargs)


def load_config(path=None, overrides=()) -> RunConfig:
    """Load the JSON config (or defaults when path is None) and apply overrides."""
    if path is None:
        payload = {}
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such config file: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(payload, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    payload = apply_overrides(payload, overrides)
    return config_from_payload(payload)


def config_reference() -> str:
    """One line per config key with type and default, for --help."""
    lines = ["seed: int = 0"]

    def describe(prefix, cls):
        for f in fields(cls):
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                default = f.default_factory()
            else:
                default = None
            if dataclasses.is_dataclass(default):
                describe(f"{prefix}{f.name}.", type(default))
            else:
                type_name = type(default).__name__ if default is not None else "object"
                lines.append(f"{prefix}{f.name}: {type_name} = {default!r}")

    for name, cls in _SECTIONS.items():
        if name == "dataset":
            describe("dataset.", DatasetRecipe)
            lines.append("dataset.split_ratios: tuple = (0.8, 0.1, 0.1)")
        else:
            describe(f"{name}.", cls)
    return "\n".join(lines)
