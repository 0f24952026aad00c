"""UNet-family segmentation models with a uniform forward contract.

All three variants take N x 3 x H x W batches and return N x 1 x H x W
probability maps (post-sigmoid); the nested variant with deep supervision
returns one map per head, final head last. Spatial dims must be divisible
by 2^(depth-1).

Blocks follow the two-consecutive-3x3-convolutions pattern with optional
batch norm (conv->BN->ReLU) and dropout after the block's second
activation. Upsampling is a 2x2 transposed convolution. Channel widths
double per level from base_channels.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
VARIANTS = ("unet", "attention_unet", "nested_unet")


@dataclass
class ModelConfig:
    variant: str = "unet"
    depth: int = 4
    base_channels: int = 8
    use_batchnorm: bool = True
    dropout_rate: float = 0.0
    deep_supervision: bool = False
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 3 <= self.depth <= 5:
            raise ValueError(f"depth must be in [3, 5], got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.deep_supervision and self.variant != "nested_unet":
            raise ValueError("deep_supervision requires variant 'nested_unet'")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * (2**i) for i in range(self.depth)]


class ConvBlock(nn.Module):
    """Two consecutive 3x3 same-padding convolutions, each followed by (BN and) ReLU."""

    def __init__(self, in_ch, out_ch, use_batchnorm=True, dropout_rate=0.0):
        super().__init__()
        layers = [nn.Conv2d(in_ch, out_ch, 3, padding=1)]
        if use_batchnorm:
            layers.append(nn.BatchNorm2d(out_ch))
        layers.append(nn.ReLU(inplace=True))
        layers.append(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        if use_batchnorm:
            layers.append(nn.BatchNorm2d(out_ch))
        layers.append(nn.ReLU(inplace=True))
        if dropout_rate > 0:
            layers.append(nn.Dropout2d(dropout_rate))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class AttentionGate(nn.Module):
    """Additive attention gate on a skip connection.

    alpha = sigmoid(psi(ReLU(Wx*x + Wg*upsample(g)))), output = alpha * x.
    The gating signal g may be at a coarser (or equal) resolution than x.
    """

    def __init__(self, x_channels, g_channels, inter_channels):
        super().__init__()
        if inter_channels < 1:
            raise ValueError(f"inter_channels must be >= 1, got {inter_channels}")
        self.x_channels = x_channels
        self.g_channels = g_channels
        self.w_x = nn.Conv2d(x_channels, inter_channels, 1)
        self.w_g = nn.Conv2d(g_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def attention(self, x, g):
        """Per-pixel gate coefficients alpha in (0, 1), shaped like x's plane."""
        if x.shape[1] != self.x_channels or g.shape[1] != self.g_channels:
            raise ValueError(
                f"gate built for x:{self.x_channels}/g:{self.g_channels} channels, "
                f"got x:{x.shape[1]}/g:{g.shape[1]}"
            )
        if g.shape[-2] > x.shape[-2] or g.shape[-1] > x.shape[-1]:
            raise ValueError(
                f"gating signal must be at coarser or equal resolution than the skip "
                f"({tuple(g.shape[-2:])} vs {tuple(x.shape[-2:])})"
            )
        g_up = F.interpolate(g, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.psi(F.relu(self.w_x(x) + self.w_g(g_up))))

    def forward(self, x, g):
        return x * self.attention(x, g)


class UNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant != "unet":
            raise ValueError(f"UNet built with variant {config.variant!r}")
        self.config = config
        ch = config.channels
        kw = dict(use_batchnorm=config.use_batchnorm, dropout_rate=config.dropout_rate)
        self.encoders = nn.ModuleList(
            [ConvBlock(config.in_channels if i == 0 else ch[i - 1], ch[i], **kw) for i in range(config.depth)]
        )
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(config.depth - 1)]
        )
        self.decoders = nn.ModuleList(
            [ConvBlock(ch[i] * 2, ch[i], **kw) for i in range(config.depth - 1)]
        )
        self.head = nn.Conv2d(ch[0], config.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, self.config.depth)
        feats = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(feats[-1]))
            feats.append(x)
        d = feats[-1]
        for i in range(self.config.depth - 2, -1, -1):
            d = self.decoders[i](torch.cat([self.ups[i](d), feats[i]], dim=1))
        return torch.sigmoid(self.head(d))


class AttentionUNet(nn.Module):
    """UNet whose skip connections pass through additive attention gates (one per skip)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant != "attention_unet":
            raise ValueError(f"AttentionUNet built with variant {config.variant!r}")
        self.config = config
        ch = config.channels
        kw = dict(use_batchnorm=config.use_batchnorm, dropout_rate=config.dropout_rate)
        self.encoders = nn.ModuleList(
            [ConvBlock(config.in_channels if i == 0 else ch[i - 1], ch[i], **kw) for i in range(config.depth)]
        )
        self.pool = nn.MaxPool2d(2)
        self.gates = nn.ModuleList(
            [AttentionGate(ch[i], ch[i + 1], max(ch[i] // 2, 1)) for i in range(config.depth - 1)]
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(config.depth - 1)]
        )
        self.decoders = nn.ModuleList(
            [ConvBlock(ch[i] * 2, ch[i], **kw) for i in range(config.depth - 1)]
        )
        self.head = nn.Conv2d(ch[0], config.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, self.config.depth)
        feats = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(feats[-1]))
            feats.append(x)
        d = feats[-1]
        for i in range(self.config.depth - 2, -1, -1):
            gated = self.gates[i](feats[i], d)
            d = self.decoders[i](torch.cat([self.ups[i](d), gated], dim=1))
        return torch.sigmoid(self.head(d))


class NestedUNet(nn.Module):
    """Dense nested skip pathways; node X[i][j] sees X[i][0..j-1] plus up(X[i+1][j-1]).

    With deep supervision the heads sit on X[0][1] .. X[0][depth-1] and the
    forward pass returns their maps in that order (final head last).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant != "nested_unet":
            raise ValueError(f"NestedUNet built with variant {config.variant!r}")
        self.config = config
        ch = config.channels
        d = config.depth
        kw = dict(use_batchnorm=config.use_batchnorm, dropout_rate=config.dropout_rate)
        self.pool = nn.MaxPool2d(2)
        self.blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for i in range(d):
            self.blocks[f"x_{i}_0"] = ConvBlock(
                config.in_channels if i == 0 else ch[i - 1], ch[i], **kw
            )
        for i in range(d - 1):
            for j in range(1, d - i):
                self.ups[f"up_{i}_{j}"] = nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2)
                self.blocks[f"x_{i}_{j}"] = ConvBlock(ch[i] * j + ch[i], ch[i], **kw)
        if config.deep_supervision:
            self.heads = nn.ModuleList(
                [nn.Conv2d(ch[0], config.out_channels, 1) for _ in range(d - 1)]
            )
        else:
            self.head = nn.Conv2d(ch[0], config.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, self.config.depth)
        d = self.config.depth
        nodes = {}
        for i in range(d):
            nodes[(i, 0)] = self.blocks[f"x_{i}_0"](x if i == 0 else self.pool(nodes[(i - 1, 0)]))
        for j in range(1, d):
            for i in range(d - j):
                up = self.ups[f"up_{i}_{j}"](nodes[(i + 1, j - 1)])
                tower = [nodes[(i, k)] for k in range(j)]
                nodes[(i, j)] = self.blocks[f"x_{i}_{j}"](torch.cat(tower + [up], dim=1))
        if self.config.deep_supervision:
            return [torch.sigmoid(h(nodes[(0, j + 1)])) for j, h in enumerate(self.heads)]
        return torch.sigmoid(self.head(nodes[(0, d - 1)]))


def _check_divisible(x, depth):
    div = 2 ** (depth - 1)
    if x.ndim != 4:
        raise ValueError(f"expected an N x C x H x W batch, got shape {tuple(x.shape)}")
    if x.shape[-2] % div or x.shape[-1] % div:
        raise ValueError(
            f"spatial dims {tuple(x.shape[-2:])} must be divisible by 2^(depth-1) = {div}"
        )


_CLASSES = {"unet": UNet, "attention_unet": AttentionUNet, "nested_unet": NestedUNet}


def build_model(config: ModelConfig, seed: int = 0) -> nn.Module:
    """Build a model with deterministic He-uniform conv init and zero biases."""
    torch.manual_seed(seed)
    model = _CLASSES[config.variant](config)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(model: nn.Module, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> nn.Module:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if "version" not in payload:
        raise ValueError(f"{path}: checkpoint is missing the mandatory version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
    config = ModelConfig(**payload["config"])
    model = _CLASSES[config.variant](config)
    model.load_state_dict(payload["state_dict"])
    return model
