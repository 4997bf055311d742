"""Differentiable multi-class classifiers and the (possibly mixed) cross-entropy.

The mixed loss is computed as the convex combination of two hard
cross-entropy terms, alpha * CE(f(x), y_i) + (1 - alpha) * CE(f(x), y_j),
so attack gradients target exactly that objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from advlab.errors import ConfigurationError, NumericsError
from advlab.rng import torch_rng


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str = "cnn"  # "cnn" (4 conv blocks + global pool) or "mlp" or "linear"
    input_shape: tuple[int, int, int] = (3, 8, 8)
    num_classes: int = 2
    width: int = 32

    def __post_init__(self):
        if self.arch not in ("cnn", "mlp", "linear"):
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return ClassifierConfig(**d)


@dataclass(frozen=True)
class TargetSpec:
    """Hard label batch, or a soft (y_i, y_j, alpha) pair for mixup."""

    y_i: torch.Tensor
    y_j: torch.Tensor | None = None
    alpha: float = 1.0

    @staticmethod
    def hard(labels: torch.Tensor) -> "TargetSpec":
        return TargetSpec(y_i=labels)

    @staticmethod
    def soft(y_i: torch.Tensor, y_j: torch.Tensor, alpha: float) -> "TargetSpec":
        if not (0.0 < alpha < 1.0):
            raise ConfigurationError(f"alpha must be in (0, 1), got {alpha}")
        return TargetSpec(y_i=y_i, y_j=y_j, alpha=alpha)

    @property
    def is_soft(self) -> bool:
        return self.y_j is not None and 0.0 < self.alpha < 1.0

    def dominant_label(self) -> torch.Tensor:
        """The label with the larger mixing weight (ties go to y_i)."""
        if self.y_j is None or self.alpha >= 0.5:
            return self.y_i
        return self.y_j


class ClassifierModel(nn.Module):
    def __init__(self, config: ClassifierConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        c, h, w = config.input_shape
        width = config.width
        if config.arch == "cnn":
            self.net = nn.Sequential(
                nn.Conv2d(c, width, 3, padding=1), nn.ReLU(),
                nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
                nn.Conv2d(width, 2 * width, 3, padding=1, stride=2), nn.ReLU(),
                nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                nn.Linear(2 * width, config.num_classes),
            )
        elif config.arch == "mlp":
            self.net = nn.Sequential(
                nn.Flatten(),
                nn.Linear(c * h * w, width), nn.ReLU(),
                nn.Linear(width, width), nn.ReLU(),
                nn.Linear(width, config.num_classes),
            )
        else:
            self.net = nn.Sequential(
                nn.Flatten(), nn.Linear(c * h * w, config.num_classes)
            )
        gen = torch_rng(init_seed, "classifier-init")
        with torch.no_grad():
            for m in self.net.modules():
                if isinstance(m, (nn.Linear, nn.Conv2d)):
                    fan_in = m.weight.shape[1:].numel()
                    m.weight.copy_(
                        torch.randn(m.weight.shape, generator=gen,
                                    dtype=m.weight.dtype)
                        * (2.0 / fan_in) ** 0.5
                    )
                    m.bias.zero_()
        self.eval()

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(x.shape)} does not match "
                f"{self.config.input_shape}"
            )
        return self.net(x)


def predict_logits(model: ClassifierModel, x: torch.Tensor) -> torch.Tensor:
    logits = model(x)
    if not torch.isfinite(logits).all():
        raise NumericsError("non-finite logits")
    return logits


def predict_labels(model: ClassifierModel, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return predict_logits(model, x).argmax(dim=1)


def ce_loss(model: ClassifierModel, x: torch.Tensor,
            target: TargetSpec) -> torch.Tensor:
    """Per-sample cross-entropy; soft targets use the convex-combination form."""
    logits = model(x)
    return ce_loss_from_logits(logits, target)


def ce_loss_from_logits(logits: torch.Tensor, target: TargetSpec) -> torch.Tensor:
    n_classes = logits.shape[1]
    for labels in (target.y_i, target.y_j):
        if labels is not None and (
            labels.min() < 0 or labels.max() >= n_classes
        ):
            raise ConfigurationError(
                f"label out of range for {n_classes} classes"
            )
    loss_i = F.cross_entropy(logits, target.y_i, reduction="none")
    if not target.is_soft:
        if target.y_j is not None and target.alpha == 0.0:
            return F.cross_entropy(logits, target.y_j, reduction="none")
        return loss_i
    loss_j = F.cross_entropy(logits, target.y_j, reduction="none")
    return target.alpha * loss_i + (1.0 - target.alpha) * loss_j


def input_gradient(model: ClassifierModel, x: torch.Tensor,
                   target: TargetSpec) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    loss = ce_loss(model, x, target).sum()
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericsError("non-finite input gradient")
    return grad
