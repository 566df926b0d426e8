"""3D classifiers over single-channel MRI volumes and the cross-entropy objective."""
from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mpmri_series.labels import NUM_CLASSES

# "tiny" is a one-conv network for gradient checks and smoke runs
ARCHITECTURES = ("densenet121", "resnet50", "tiny")


@dataclasses.dataclass(frozen=True)
class ClassifierConfig:
    architecture: str = "densenet121"
    in_channels: int = 1
    num_classes: int = NUM_CLASSES
    growth_rate: int = 32
    block_layers: tuple[int, ...] = (6, 12, 24, 16)
    compression: float = 0.5
    init_features: int = 64
    bn_size: int = 4
    resnet_layers: tuple[int, ...] = (3, 4, 6, 3)
    input_shape: tuple[int, int, int] = (256, 256, 36)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        ints = {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "growth_rate": self.growth_rate,
            "init_features": self.init_features,
            "bn_size": self.bn_size,
        }
        for name, value in ints.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        for name in ("block_layers", "resnet_layers", "input_shape"):
            values = getattr(self, name)
            if not values or any(v <= 0 for v in values):
                raise ValueError(f"{name} must be non-empty and all positive, got {values}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must have 3 dims, got {self.input_shape}")
        if not 0 < self.compression <= 1:
            raise ValueError(f"compression must be in (0, 1], got {self.compression}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in fields}
        return cls(**kw)


def densenet_channel_plan(init_features: int, growth_rate: int, block_layers: Sequence[int],
                          compression: float) -> list[tuple[str, int]]:
    """Channel count after the stem, each dense block and each transition."""
    plan = [("stem", init_features)]
    c = init_features
    for i, n in enumerate(block_layers):
        c = c + n * growth_rate
        plan.append((f"block{i + 1}", c))
        if i != len(block_layers) - 1:
            c = int(math.floor(c * compression))
            plan.append((f"transition{i + 1}", c))
    return plan


class _DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth_rate: int, bn_size: int):
        super().__init__()
        self.norm1 = nn.BatchNorm3d(in_ch)
        self.conv1 = nn.Conv3d(in_ch, bn_size * growth_rate, kernel_size=1, bias=False)
        self.norm2 = nn.BatchNorm3d(bn_size * growth_rate)
        self.conv2 = nn.Conv3d(bn_size * growth_rate, growth_rate, kernel_size=3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        return torch.cat([x, out], dim=1)


class _Transition(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.BatchNorm3d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv3d(in_ch, out_ch, kernel_size=1, bias=False),
            _HalvingAvgPool(),
        )


class _HalvingAvgPool(nn.Module):
    """2x average pooling that leaves axes already reduced to one voxel untouched.

    Shallow inputs (e.g. 8 slices) run out of depth before the last transition.
    """

    def forward(self, x):
        k = tuple(2 if s >= 2 else 1 for s in x.shape[2:])
        return F.avg_pool3d(x, kernel_size=k, stride=k)


def _stem(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=7, stride=2, padding=3, bias=False),
        nn.BatchNorm3d(out_ch),
        nn.ReLU(inplace=True),
        nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
    )


class DenseNet3D(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [_stem(config.in_channels, config.init_features)]
        c = config.init_features
        for i, n in enumerate(config.block_layers):
            for _ in range(n):
                layers.append(_DenseLayer(c, config.growth_rate, config.bn_size))
                c += config.growth_rate
            if i != len(config.block_layers) - 1:
                out = int(math.floor(c * config.compression))
                layers.append(_Transition(c, out))
                c = out
        layers += [nn.BatchNorm3d(c), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.num_features = c
        self.classifier = nn.Linear(c, config.num_classes)

    def forward(self, x):
        x = self.features(x)
        x = F.adaptive_avg_pool3d(x, 1).flatten(1)
        return self.classifier(x)


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv3d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = nn.Conv3d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(width)
        self.conv3 = nn.Conv3d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm3d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class ResNet3D(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [_stem(config.in_channels, config.init_features)]
        c = config.init_features
        width = config.init_features
        for i, n in enumerate(config.resnet_layers):
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(_Bottleneck(c, width, stride))
                c = width * _Bottleneck.expansion
            width *= 2
        self.features = nn.Sequential(*layers)
        self.num_features = c
        self.classifier = nn.Linear(c, config.num_classes)

    def forward(self, x):
        x = self.features(x)
        x = F.adaptive_avg_pool3d(x, 1).flatten(1)
        return self.classifier(x)


class TinyClassifier(nn.Module):
    """Conv 3x3x3 (``init_features`` channels), batch norm, global average pool, linear head.

    Small enough for finite-difference gradient checks and smoke tests.
    The conv has no bias because the norm layer would cancel it.
    """

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        width = config.init_features
        self.conv = nn.Conv3d(config.in_channels, width, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm3d(width)
        self.classifier = nn.Linear(width, config.num_classes)
        self.num_features = width

    def forward(self, x):
        x = self.norm(self.conv(x))
        return self.classifier(x.mean(dim=(2, 3, 4)))


def _init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            nn.init.zeros_(m.bias)


def build_classifier(config: ClassifierConfig, seed: int | None = None) -> nn.Module:
    """Instantiate the configured architecture with fan-in scaled random weights.

    With a seed the parameters are a pure function of (config, seed); the global
    torch RNG is left untouched.
    """
    if seed is None:
        return _instantiate(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _instantiate(config)


def _instantiate(config: ClassifierConfig) -> nn.Module:
    if config.architecture == "tiny":
        model = TinyClassifier(config)
    elif config.architecture == "densenet121":
        model = DenseNet3D(config)
    else:
        model = ResNet3D(config)
    _init_weights(model)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: nn.Module, x) -> torch.Tensor:
    """Logits for one volume (D0, D1, D2), a channel volume (1, D0, D1, D2) or a batch."""
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    cfg = model.config
    expected = (cfg.in_channels, *cfg.input_shape)
    if x.dim() == 3:
        x = x.unsqueeze(0).unsqueeze(0)
    elif x.dim() == 4:
        x = x.unsqueeze(0)
    if x.dim() != 5 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"input shape mismatch: expected (N, {', '.join(map(str, expected))}), "
                         f"got {tuple(x.shape)}")
    return model(x)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts a vector or a (N, C) array."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probabilities, target: int) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    return float(-np.log(max(p[int(target)], 1e-12)))


def mean_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch mean of -sum_i y_i log(softmax(z)_i) for one-hot y; differentiable."""
    log_p = F.log_softmax(logits, dim=1)
    return -log_p.gather(1, targets.view(-1, 1)).mean()
