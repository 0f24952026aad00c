"""Epoch loop: optimize, validate, snapshot, save diagnostics, early-stop.

Every epoch trains over seeded-shuffled batches, validates, predicts one
snapshot sample and writes its probability map, saves a checkpoint, a
first-layer filter grid and a gradient-flow record. Training stops when
val loss has not improved for `patience` epochs; the returned model is
the checkpoint with the best val loss.

Artifacts layout under artifacts_dir:
    checkpoints/epoch_{n}.ckpt, best.ckpt, history.csv,
    snapshots/epoch_{n}.png, filters/epoch_{n}.png, gradflow/epoch_{n}.csv
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .losses import LossConfig, combined_loss, deep_supervision_loss, slice_dice_at_threshold
from .models import save_checkpoint, load_checkpoint

IMPROVEMENT_EPS = 1e-12


@dataclass
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    patience: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    snapshot_sample_index: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be > 0, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be > 0, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd_momentum', got {self.optimizer!r}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(
                f"patience must be in [1, max_epochs={self.max_epochs}], got {self.patience}"
            )


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    gradient_flow: list
    wall_seconds: float


def sample_tensors(samples) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack SliceSamples into (N,3,H,W) float32 images and (N,1,H,W) float32 labels."""
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.float32))[:, None]
    return images, labels


def model_batch_loss(outputs, labels: torch.Tensor, loss_config: LossConfig) -> torch.Tensor:
    """Mean over samples of the per-sample loss; handles deep-supervision head lists."""
    if isinstance(outputs, (list, tuple)):
        per_sample = [
            deep_supervision_loss([h[i] for h in outputs], labels[i], loss_config)
            for i in range(labels.shape[0])
        ]
    else:
        per_sample = [
            combined_loss(outputs[i], labels[i], loss_config) for i in range(labels.shape[0])
        ]
    return torch.stack(per_sample).mean()


def final_map(outputs) -> torch.Tensor:
    """The final prediction map (last head under deep supervision)."""
    return outputs[-1] if isinstance(outputs, (list, tuple)) else outputs


def validate(model: nn.Module, val_set, loss_config: LossConfig, batch_size: int = 16):
    """Mean per-sample loss and mean slice Dice at threshold 0.5; no mutation."""
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    was_training = model.training
    model.eval()
    losses, dices = [], []
    with torch.no_grad():
        for start in range(0, len(val_set), batch_size):
            chunk = [val_set[i] for i in range(start, min(start + batch_size, len(val_set)))]
            images, labels = sample_tensors(chunk)
            outputs = model(images)
            if isinstance(outputs, (list, tuple)):
                for i in range(labels.shape[0]):
                    losses.append(
                        float(deep_supervision_loss([h[i] for h in outputs], labels[i], loss_config))
                    )
            else:
                for i in range(labels.shape[0]):
                    losses.append(float(combined_loss(outputs[i], labels[i], loss_config)))
            dices.extend(slice_dice_at_threshold(final_map(outputs), labels))
    if was_training:
        model.train()
    return float(np.mean(losses)), float(np.mean(dices))


def trainable_layers(model: nn.Module):
    """Leaf modules with trainable parameters, in module registration order
    (encoder blocks through to the output head)."""
    out = []
    for name, module in model.named_modules():
        if list(module.children()):
            continue
        if any(p.requires_grad for p in module.parameters(recurse=False)):
            out.append((name, module))
    return out


def _collect_gradient_flow(model: nn.Module):
    flow = []
    for name, module in trainable_layers(model):
        grads = [p.grad.abs().mean().item() for p in module.parameters(recurse=False) if p.grad is not None]
        flow.append((name, float(np.mean(grads)) if grads else 0.0))
    return flow


def gradient_flow(model: nn.Module, batch, loss_config: LossConfig):
    """One (layer, mean |grad|) entry per trainable layer for a single batch."""
    images, labels = batch if isinstance(batch, tuple) else sample_tensors(batch)
    model.zero_grad(set_to_none=True)
    outputs = model(images)
    loss = model_batch_loss(outputs, labels, loss_config)
    loss.backward()
    flow = _collect_gradient_flow(model)
    model.zero_grad(set_to_none=True)
    return flow


def _save_png(array2d: np.ndarray, path: Path, upscale: int = 1) -> None:
    arr = np.asarray(array2d, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    img = (scaled * 255.0).round().astype(np.uint8)
    if upscale > 1:
        img = np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, "PNG")


def _first_conv_filter_grid(model: nn.Module) -> np.ndarray:
    """Tile the first conv layer's kernels into one (out x in) grid with 1-px gaps."""
    first = next(m for m in model.modules() if isinstance(m, nn.Conv2d))
    w = first.weight.detach().cpu().numpy()
    out_ch, in_ch, kh, kw = w.shape
    grid = np.zeros((out_ch * (kh + 1) - 1, in_ch * (kw + 1) - 1), dtype=np.float64)
    for o in range(out_ch):
        for i in range(in_ch):
            grid[o * (kh + 1) : o * (kh + 1) + kh, i * (kw + 1) : i * (kw + 1) + kw] = w[o, i]
    return grid


def _write_gradflow_csv(flow, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "mean_abs_grad"])
        for name, value in flow:
            writer.writerow([name, f"{value:.10e}"])


def _write_history_csv(reports, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_dice"])
        for r in reports:
            writer.writerow([r.epoch, f"{r.train_loss:.10f}", f"{r.val_loss:.10f}", f"{r.val_dice:.10f}"])


def train(model: nn.Module, train_set, val_set, config: TrainConfig, artifacts_dir):
    """Run the epoch procedure; returns (best model, list of EpochReport)."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    artifacts_dir = Path(artifacts_dir)
    for sub in ("checkpoints", "snapshots", "filters", "gradflow"):
        (artifacts_dir / sub).mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=0.9)

    snapshot_idx = config.snapshot_sample_index % len(val_set)
    reports = []
    best_val = float("inf")
    epochs_without_improvement = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        model.train()
        order = rng.permutation(len(train_set))
        batch_losses = []
        flow = []
        n_batches = int(np.ceil(len(order) / config.batch_size))
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            images, labels = sample_tensors([train_set[i] for i in idx])
            optimizer.zero_grad(set_to_none=True)
            outputs = model(images)
            loss = model_batch_loss(outputs, labels, config.loss)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            if b == n_batches - 1:
                flow = _collect_gradient_flow(model)
            optimizer.step()
            batch_losses.append(float(loss.detach()))

        val_loss, val_dice = validate(model, val_set, config.loss, config.batch_size)

        snap_images, _ = sample_tensors([val_set[snapshot_idx]])
        model.eval()
        with torch.no_grad():
            snap_prob = final_map(model(snap_images))[0, 0].cpu().numpy()
        _save_png(snap_prob, artifacts_dir / "snapshots" / f"epoch_{epoch}.png")
        _save_png(_first_conv_filter_grid(model), artifacts_dir / "filters" / f"epoch_{epoch}.png", upscale=8)
        _write_gradflow_csv(flow, artifacts_dir / "gradflow" / f"epoch_{epoch}.csv")
        save_checkpoint(model, artifacts_dir / "checkpoints" / f"epoch_{epoch}.ckpt")

        reports.append(
            EpochReport(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss,
                val_dice=val_dice,
                gradient_flow=flow,
                wall_seconds=time.monotonic() - t0,
            )
        )

        if best_val - val_loss > IMPROVEMENT_EPS:
            best_val = val_loss
            epochs_without_improvement = 0
            save_checkpoint(model, artifacts_dir / "best.ckpt")
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= config.patience:
                break

    _write_history_csv(reports, artifacts_dir / "history.csv")
    best_model = load_checkpoint(artifacts_dir / "best.ckpt")
    return best_model, reports
