"""Input mixup and the robust-mixup attack strategy.

Robust mixup first interpolates the pair, then attacks the interpolated
sample under the mixed cross-entropy, so the perturbation step is the
final operation. The interpolate-after-attack baseline (attack each
member with its hard label, then mix) is provided for comparison; its
combined perturbation is feasible by convexity but generally not the
maximizer of the mixed loss.

The interpolation weight alpha is drawn from Beta(tau, tau). (The
symmetric Beta is the standard mixup choice; a negative shape parameter
is not a distribution.)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from advlab.attacks import (
    AdversarialExample,
    ThreatModel,
    jsa_attack,
    pgd_attack,
)
from advlab.classifier import TargetSpec
from advlab.errors import ConfigurationError

_ALPHA_FLOOR = 1e-6


@dataclass
class MixupBatch:
    x_i: torch.Tensor
    x_j: torch.Tensor
    y_i: torch.Tensor
    y_j: torch.Tensor
    alpha: float

    def __post_init__(self):
        if self.x_i.shape != self.x_j.shape:
            raise ConfigurationError("mixup pair shapes differ")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigurationError(f"alpha must be in (0, 1), got {self.alpha}")

    @property
    def x_mix(self) -> torch.Tensor:
        return input_mixup(self.x_i, self.x_j, self.alpha)

    @property
    def target(self) -> TargetSpec:
        return TargetSpec.soft(self.y_i, self.y_j, self.alpha)


def sample_alpha(tau: float, rng: np.random.Generator) -> float:
    """Draw the interpolation weight from Beta(tau, tau), clamped into the
    open interval so endpoint degeneracies cannot occur by rounding."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    alpha = float(rng.beta(tau, tau))
    return min(max(alpha, _ALPHA_FLOOR), 1.0 - _ALPHA_FLOOR)


def input_mixup(x_i: torch.Tensor, x_j: torch.Tensor, alpha: float) -> torch.Tensor:
    if x_i.shape != x_j.shape:
        raise ConfigurationError("mixup pair shapes differ")
    return alpha * x_i + (1.0 - alpha) * x_j


def robust_mixup_attack(model, flow, batch: MixupBatch, threat: ThreatModel, *,
                        seed: int = 0, clip_in_loss: bool = True,
                        final_clip: bool = True) -> AdversarialExample:
    """Attack the interpolated sample under the mixed loss (joint space when
    the latent budget is active)."""
    return jsa_attack(model, flow, batch.x_mix, batch.target, threat,
                      seed=seed, clip_in_loss=clip_in_loss,
                      final_clip=final_clip)


def iat_baseline_mix(model, flow, batch: MixupBatch, threat: ThreatModel, *,
                     attack: str = "pgd", seed: int = 0) -> torch.Tensor:
    """Interpolate-after-attack baseline: attack x_i and x_j independently
    with their hard labels, then take the convex combination of the
    attacked images."""
    if attack == "pgd":
        adv_i = pgd_attack(model, batch.x_i, TargetSpec.hard(batch.y_i), threat,
                           seed=seed)
        adv_j = pgd_attack(model, batch.x_j, TargetSpec.hard(batch.y_j), threat,
                           seed=seed)
    elif attack == "jsa":
        adv_i = jsa_attack(model, flow, batch.x_i, TargetSpec.hard(batch.y_i),
                           threat, seed=seed)
        adv_j = jsa_attack(model, flow, batch.x_j, TargetSpec.hard(batch.y_j),
                           threat, seed=seed)
    else:
        raise ConfigurationError(f"unknown baseline attack {attack!r}")
    return input_mixup(adv_i.x_adv, adv_j.x_adv, batch.alpha)
