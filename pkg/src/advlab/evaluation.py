"""Robustness harness: per-attack accuracy tables, synthetic corruption
sweeps, and per-epoch training-curve files.

Machine-readable reports are deterministic: identical (checkpoint, suite,
seed) inputs produce byte-identical JSON. Wall-clock metadata lives only
in the human-readable rendering.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage
import torch

from advlab.attacks import ThreatModel, jsa_attack, joint_attack, pgd_attack
from advlab.classifier import TargetSpec, predict_labels
from advlab.data import TensorDataset
from advlab.errors import ConfigurationError
from advlab.rng import np_rng
from advlab.training import TrainState

ATTACK_EVAL_KINDS = ("pgd", "fgsm", "l2_pgd", "om_pgd", "jsa")

CURVE_HEADER = "epoch,train_loss,std_acc,robust_acc"

CORRUPTION_KINDS = (
    "gaussian_noise", "gaussian_blur", "contrast", "pixelate", "salt_pepper"
)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int  # 0 = identity, 1..5 increasingly severe
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigurationError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ConfigurationError("severity must be in 0..5")


@dataclass
class EvalReport:
    rows: dict  # name -> {accuracy, correct, n_samples, threat, seed}
    standard_accuracy: float
    checkpoint_id: str = ""
    seed: int = 0
    max_samples: int | None = None
    timestamp: str = ""

    def average_attack_accuracy(self) -> float:
        """Simple mean over attack rows; the standard column is excluded."""
        if not self.rows:
            return float("nan")
        return float(np.mean([r["accuracy"] for r in self.rows.values()]))

    def to_json(self) -> str:
        body = {
            "checkpoint_id": self.checkpoint_id,
            "seed": self.seed,
            "max_samples": self.max_samples,
            "standard_accuracy": self.standard_accuracy,
            "average_attack_accuracy": self.average_attack_accuracy(),
            "rows": self.rows,
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    def format_table(self) -> str:
        lines = [
            f"checkpoint: {self.checkpoint_id}  seed: {self.seed}"
            + (f"  generated: {self.timestamp}" if self.timestamp else ""),
            f"{'attack':<24} {'accuracy':>9} {'n':>6}",
            "-" * 42,
            f"{'standard':<24} {self.standard_accuracy:>9.4f} "
            f"{next(iter(self.rows.values()))['n_samples'] if self.rows else 0:>6}",
        ]
        for name, row in self.rows.items():
            lines.append(
                f"{name:<24} {row['accuracy']:>9.4f} {row['n_samples']:>6}"
            )
        lines.append("-" * 42)
        lines.append(
            f"{'avg (attacks only)':<24} {self.average_attack_accuracy():>9.4f}"
        )
        return "\n".join(lines)


def _accuracy(model, x, labels) -> tuple[int, float]:
    preds = predict_labels(model, x)
    correct = int((preds == labels).sum())
    return correct, correct / len(labels)


def run_attack(kind: str, model, flow, x, labels, threat: ThreatModel, *,
               seed: int = 0):
    target = TargetSpec.hard(labels)
    if kind == "pgd":
        return pgd_attack(model, x, target, threat, seed=seed)
    if kind == "fgsm":
        from advlab.attacks import fgsm_attack

        return fgsm_attack(model, x, target, threat)
    if kind == "l2_pgd":
        from advlab.attacks import l2_pgd_attack

        return l2_pgd_attack(model, x, target, threat, seed=seed)
    if kind == "om_pgd":
        t = replace(threat, image_eps=0.0, image_step=0.0)
        return joint_attack(model, flow, x, target, t, seed=seed)
    if kind == "jsa":
        return jsa_attack(model, flow, x, target, threat, seed=seed)
    raise ConfigurationError(f"unknown attack kind {kind!r}")


def default_suite(eps: float = 8 / 255, eta: float = 0.02,
                  iterations_pgd: int = 20, iterations_jsa: int = 50,
                  l2_eps: float = 0.5) -> list[tuple[str, str, ThreatModel]]:
    """Seen-attack suite mirroring the standard report columns:
    PGD-20, L2-PGD, OM-PGD, and the joint attack with 50 steps."""
    return [
        (f"pgd-{iterations_pgd}", "pgd",
         ThreatModel(image_eps=eps, image_step=eps / 4,
                     iterations=iterations_pgd)),
        ("l2-pgd", "l2_pgd",
         ThreatModel(norm="2", image_eps=l2_eps, image_step=l2_eps / 4,
                     iterations=iterations_pgd)),
        ("om-pgd", "om_pgd",
         ThreatModel(latent_eta=eta, latent_step=eta / 4,
                     iterations=iterations_pgd)),
        (f"jsa-{iterations_jsa}", "jsa",
         ThreatModel(image_eps=eps, image_step=eps / 4, latent_eta=eta,
                     latent_step=eta / 4, iterations=iterations_jsa)),
    ]


def evaluate_robustness(model, flow, dataset: TensorDataset,
                        suite: list[tuple[str, str, ThreatModel]], *,
                        seed: int = 0, max_samples: int | None = None,
                        checkpoint_id: str = "",
                        batch_size: int = 128) -> EvalReport:
    if not suite:
        raise ConfigurationError("attack suite is empty")
    for name, kind, _ in suite:
        if kind not in ATTACK_EVAL_KINDS:
            raise ConfigurationError(f"unknown attack kind {kind!r} in suite")
    dtype = next(model.parameters()).dtype
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    images = dataset.images_t(dtype)[:n]
    labels = dataset.labels_t()[:n]
    std_correct = 0
    rows = {}
    for start in range(0, n, batch_size):
        x, y = images[start : start + batch_size], labels[start : start + batch_size]
        std_correct += _accuracy(model, x, y)[0]
    for name, kind, threat in suite:
        correct = 0
        for start in range(0, n, batch_size):
            x = images[start : start + batch_size]
            y = labels[start : start + batch_size]
            adv = run_attack(kind, model, flow, x, y, threat, seed=seed)
            correct += _accuracy(model, adv.x_adv, y)[0]
        rows[name] = {
            "accuracy": correct / n, "correct": correct, "n_samples": n,
            "threat": threat.to_dict(), "seed": seed, "kind": kind,
        }
    return EvalReport(
        rows=rows, standard_accuracy=std_correct / n,
        checkpoint_id=checkpoint_id, seed=seed, max_samples=max_samples,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


# -- synthetic corruptions -------------------------------------------------

_NOISE_SIGMA = (0.02, 0.04, 0.08, 0.12, 0.18)
_BLUR_SIGMA = (0.4, 0.6, 0.8, 1.0, 1.5)
_CONTRAST = (0.8, 0.6, 0.45, 0.3, 0.2)
_PIXELATE = (2, 2, 4, 4, 8)
_SALT_PEPPER = (0.01, 0.03, 0.06, 0.10, 0.17)


def apply_corruption(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Deterministic per-seed corruption; severity 0 is the identity."""
    if spec.severity == 0:
        return images.copy()
    s = spec.severity - 1
    rng = np_rng(spec.seed, "corruption", spec.kind, spec.severity)
    x = images.astype(np.float64, copy=True)
    if spec.kind == "gaussian_noise":
        x = x + _NOISE_SIGMA[s] * rng.standard_normal(x.shape)
    elif spec.kind == "gaussian_blur":
        x = scipy.ndimage.gaussian_filter(
            x, sigma=(0, 0, _BLUR_SIGMA[s], _BLUR_SIGMA[s])
        )
    elif spec.kind == "contrast":
        mean = x.mean(axis=(2, 3), keepdims=True)
        x = (x - mean) * _CONTRAST[s] + mean
    elif spec.kind == "pixelate":
        block = min(_PIXELATE[s], x.shape[2], x.shape[3])
        n, c, h, w = x.shape
        hb, wb = h // block, w // block
        coarse = x[:, :, : hb * block, : wb * block]
        coarse = coarse.reshape(n, c, hb, block, wb, block).mean(axis=(3, 5))
        x = np.repeat(np.repeat(coarse, block, axis=2), block, axis=3)
        x = np.pad(
            x, ((0, 0), (0, 0), (0, h - hb * block), (0, w - wb * block)),
            mode="edge",
        )
    elif spec.kind == "salt_pepper":
        mask = rng.random(x.shape) < _SALT_PEPPER[s]
        salt = rng.random(x.shape) < 0.5
        x = np.where(mask, np.where(salt, 1.0, 0.0), x)
    return np.clip(x, 0.0, 1.0)


def evaluate_corruptions(model, dataset: TensorDataset,
                         specs: list[CorruptionSpec], *,
                         max_samples: int | None = None,
                         checkpoint_id: str = "",
                         batch_size: int = 256) -> EvalReport:
    dtype = next(model.parameters()).dtype
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    images = dataset.images[:n]
    labels = dataset.labels_t()[:n]
    std_correct = 0
    x_clean = torch.as_tensor(images, dtype=dtype)
    for start in range(0, n, batch_size):
        std_correct += _accuracy(
            model, x_clean[start : start + batch_size],
            labels[start : start + batch_size],
        )[0]
    rows = {}
    for spec in specs:
        corrupted = torch.as_tensor(apply_corruption(images, spec), dtype=dtype)
        correct = 0
        for start in range(0, n, batch_size):
            correct += _accuracy(
                model, corrupted[start : start + batch_size],
                labels[start : start + batch_size],
            )[0]
        rows[f"{spec.kind}@{spec.severity}"] = {
            "accuracy": correct / n, "correct": correct, "n_samples": n,
            "threat": {"kind": spec.kind, "severity": spec.severity},
            "seed": spec.seed, "kind": "corruption",
        }
    return EvalReport(
        rows=rows, standard_accuracy=std_correct / n,
        checkpoint_id=checkpoint_id, seed=specs[0].seed if specs else 0,
        max_samples=max_samples, timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


# -- training curves -------------------------------------------------------


def track_training_curves(state: TrainState, path):
    """Write per-epoch curves as CSV. Floats use repr, so values round-trip
    loss-free."""
    if not state.metrics:
        raise ConfigurationError("training state has no completed epochs")
    lines = [CURVE_HEADER]
    for m in state.metrics:
        lines.append(
            f"{m.epoch},{m.train_loss!r},{m.std_acc!r},{m.robust_acc!r}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_curves(path) -> dict[str, np.ndarray]:
    with open(path) as f:
        header = f.readline().strip()
        if header != CURVE_HEADER:
            raise ConfigurationError(
                f"{path}: unexpected curve header {header!r}"
            )
        rows = [line.strip().split(",") for line in f if line.strip()]
    cols = CURVE_HEADER.split(",")
    data = np.array([[float(v) for v in row] for row in rows])
    if data.size == 0:
        data = data.reshape(0, len(cols))
    return {name: data[:, i] for i, name in enumerate(cols)}
