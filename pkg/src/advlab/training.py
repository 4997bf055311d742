"""Adversarial training loops.

All modes run the same outer loop; they differ only in how the batch is
transformed before the cross-entropy step. With every budget at zero the
transformation is the identity, so zero-budget adversarial training is
bit-identical to normal training at the same seed. The generator flow is
never updated during classifier training.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from advlab.attacks import ThreatModel, jsa_attack, joint_attack, pgd_attack
from advlab.classifier import ClassifierModel, TargetSpec, ce_loss, predict_labels
from advlab.container import read_container, write_container
from advlab.data import TensorDataset, load_checkpoint, save_checkpoint
from advlab.errors import CheckpointError, ConfigurationError, NumericsError
from advlab.mixup import MixupBatch, robust_mixup_attack, sample_alpha
from advlab.rng import np_rng

MODES = ("normal", "at", "om_at", "ijsat")
ATTACK_KINDS = ("pgd", "l2_pgd", "jsa", "om_pgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    drop_epochs: tuple[int, ...] = ()
    drop_factor: float = 0.1
    threat: ThreatModel = field(default_factory=ThreatModel)
    tau: float = 0.1
    mode: str = "normal"
    attack_kind: str = "pgd"  # inner attack for mode "at"
    seed: int = 0
    eval_samples: int = 256
    probe_threat: ThreatModel | None = None  # robust-accuracy probe (PGD)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.attack_kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.attack_kind!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        drops = tuple(self.drop_epochs)
        if any(d < 1 or d > self.epochs for d in drops):
            raise ConfigurationError("drop epochs must lie within [1, epochs]")
        if any(b >= a for a, b in zip(drops[1:], drops)):
            raise ConfigurationError("drop epochs must be strictly increasing")

    def resolved_probe(self) -> ThreatModel:
        if self.probe_threat is not None:
            return self.probe_threat
        eps = self.threat.image_eps if self.threat.image_eps > 0 else 0.1
        return ThreatModel(image_eps=eps, image_step=eps / 4, iterations=10)

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "drop_epochs": list(self.drop_epochs),
            "drop_factor": self.drop_factor,
            "threat": self.threat.to_dict(), "tau": self.tau,
            "mode": self.mode, "attack_kind": self.attack_kind,
            "seed": self.seed, "eval_samples": self.eval_samples,
            "probe_threat": (
                None if self.probe_threat is None else self.probe_threat.to_dict()
            ),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["drop_epochs"] = tuple(d.get("drop_epochs", ()))
        d["threat"] = ThreatModel.from_dict(d["threat"])
        if d.get("probe_threat") is not None:
            d["probe_threat"] = ThreatModel.from_dict(d["probe_threat"])
        return TrainConfig(**d)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    std_acc: float
    robust_acc: float


@dataclass
class TrainState:
    epoch: int = 0
    metrics: list[EpochMetrics] = field(default_factory=list)
    rng_states: dict = field(default_factory=dict)
    checkpoint_path: str | None = None


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Effective learning rate at a 1-based epoch index."""
    drops = sum(1 for d in config.drop_epochs if d <= epoch)
    return config.lr * config.drop_factor**drops


def ijsat_step(model, flow, pair, tau: float, threat: ThreatModel,
               rng: np.random.Generator):
    """One interpolated joint-space step: sample the mixing weight, mix the
    pair in image space, encode the mixed image, run the joint attack
    against the mixed targets, and return (mixed loss at the attack
    output, gradient w.r.t. the classifier parameters).

    The attack output feeds the loss directly; nothing is re-interpolated
    afterwards.
    """
    x_i, y_i, x_j, y_j = pair
    alpha = sample_alpha(tau, rng)
    batch = MixupBatch(x_i=x_i, x_j=x_j, y_i=y_i, y_j=y_j, alpha=alpha)
    adv = robust_mixup_attack(model, flow, batch, threat)
    loss = ce_loss(model, adv.x_adv, batch.target).mean()
    if not torch.isfinite(loss):
        raise NumericsError("non-finite mixed loss in training step")
    grads = torch.autograd.grad(loss, [p for p in model.parameters()])
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericsError("non-finite parameter gradient")
    return loss.detach(), grads


def _identity_generator(model, x, y):
    return x


def make_attack_generator(kind: str, threat: ThreatModel, flow=None):
    """Inner-maximization plug point: (model, x, y) -> adversarial batch."""
    if threat.image_eps == 0 and threat.latent_eta == 0:
        return _identity_generator
    if kind == "pgd":
        def gen(model, x, y):
            return pgd_attack(model, x, TargetSpec.hard(y), threat).x_adv
    elif kind == "l2_pgd":
        t2 = replace(threat, norm="2")

        def gen(model, x, y):
            return pgd_attack(model, x, TargetSpec.hard(y), t2).x_adv
    elif kind == "om_pgd":
        t_om = replace(threat, image_eps=0.0, image_step=0.0)

        def gen(model, x, y):
            return joint_attack(model, flow, x, TargetSpec.hard(y), t_om).x_adv
    elif kind == "jsa":
        def gen(model, x, y):
            return jsa_attack(model, flow, x, TargetSpec.hard(y), threat).x_adv
    else:
        raise ConfigurationError(f"unknown attack kind {kind!r}")
    return gen


def _evaluate_epoch(model, images, labels, probe: ThreatModel):
    with torch.no_grad():
        std_acc = float((predict_labels(model, images) == labels).double().mean())
    if probe.image_eps > 0:
        adv = pgd_attack(model, images, TargetSpec.hard(labels), probe)
        robust_acc = float(
            (predict_labels(model, adv.x_adv) == labels).double().mean()
        )
    else:
        robust_acc = std_acc
    return std_acc, robust_acc


class _Loop:
    """Shared training loop state: model, optimizer, RNG streams."""

    def __init__(self, model: ClassifierModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.opt = torch.optim.SGD(
            model.parameters(), lr=config.lr, momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.order_rng = np_rng(config.seed, "train-order")
        self.pair_rng = np_rng(config.seed, "train-pair")
        self.alpha_rng = np_rng(config.seed, "train-alpha")
        self.state = TrainState()

    def set_lr(self, lr: float):
        for group in self.opt.param_groups:
            group["lr"] = lr

    def apply_grads(self, grads):
        for p, g in zip(self.model.parameters(), grads):
            p.grad = g.clone()
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)


def train_classifier(
    model: ClassifierModel,
    dataset: TensorDataset,
    config: TrainConfig,
    *,
    flow=None,
    attack_generator=None,
    eval_dataset: TensorDataset | None = None,
    loop: "_Loop | None" = None,
) -> TrainState:
    """Run the configured training loop to completion and return the state
    with one metrics entry per epoch.

    `attack_generator` overrides the mode-derived inner maximization for
    mode "at" (the plug point for combining the joint attack with other
    adversarial training schemes).
    """
    if config.mode in ("om_at", "ijsat") and flow is None:
        raise ConfigurationError(f"mode {config.mode!r} requires a flow model")
    dtype = next(model.parameters()).dtype
    images = dataset.images_t(dtype)
    labels = dataset.labels_t()
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    n_eval = min(config.eval_samples, len(eval_ds))
    eval_images = eval_ds.images_t(dtype)[:n_eval]
    eval_labels = eval_ds.labels_t()[:n_eval]
    probe = config.resolved_probe()

    if attack_generator is None:
        if config.mode == "normal":
            attack_generator = _identity_generator
        elif config.mode == "at":
            attack_generator = make_attack_generator(
                config.attack_kind, config.threat, flow
            )
        elif config.mode == "om_at":
            attack_generator = make_attack_generator("om_pgd", config.threat, flow)

    if loop is None:
        loop = _Loop(model, config)
    n = len(dataset)
    start_epoch = loop.state.epoch
    for epoch in range(start_epoch + 1, config.epochs + 1):
        loop.set_lr(lr_at_epoch(config, epoch))
        perm = loop.order_rng.permutation(n)
        total, count = 0.0, 0
        for batch_idx, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            x = images[idx]
            y = labels[idx]
            if config.mode == "ijsat":
                pair_idx = loop.pair_rng.permutation(len(idx))
                pair = (x, y, x[pair_idx], y[pair_idx])
                loss, grads = ijsat_step(
                    model, flow, pair, config.tau, config.threat,
                    loop.alpha_rng,
                )
                loop.apply_grads(grads)
            else:
                x_in = attack_generator(model, x, y)
                loss = ce_loss(model, x_in, TargetSpec.hard(y)).mean()
                if not torch.isfinite(loss):
                    raise NumericsError(
                        f"NaN loss at epoch {epoch}, batch {batch_idx}",
                        epoch=epoch, batch=batch_idx,
                    )
                loop.opt.zero_grad(set_to_none=True)
                loss.backward()
                loop.opt.step()
                loss = loss.detach()
            total += float(loss) * len(idx)
            count += len(idx)
        std_acc, robust_acc = _evaluate_epoch(model, eval_images, eval_labels, probe)
        loop.state.epoch = epoch
        loop.state.metrics.append(
            EpochMetrics(epoch, total / count, std_acc, robust_acc)
        )
    loop.state.rng_states = {
        "order": loop.order_rng.bit_generator.state,
        "pair": loop.pair_rng.bit_generator.state,
        "alpha": loop.alpha_rng.bit_generator.state,
    }
    return loop.state


def adversarial_train(model, dataset, attack_generator, config: TrainConfig,
                      *, flow=None, eval_dataset=None) -> TrainState:
    """Min-max training with a pluggable inner-maximization generator."""
    config = replace(config, mode="at")
    return train_classifier(
        model, dataset, config, flow=flow, attack_generator=attack_generator,
        eval_dataset=eval_dataset,
    )


def ijsat_train(model, flow, dataset, config: TrainConfig, *,
                eval_dataset=None) -> TrainState:
    config = replace(config, mode="ijsat")
    return train_classifier(
        model, dataset, config, flow=flow, eval_dataset=eval_dataset
    )


# -- pause/resume ----------------------------------------------------------


def save_train_state(path, model: ClassifierModel, loop: _Loop,
                     config: TrainConfig):
    """Snapshot everything a bit-exact resume needs: parameters, momentum
    buffers, metrics, and RNG stream states."""
    arrays = {
        f"model/{name}": t.detach().numpy()
        for name, t in model.state_dict().items()
    }
    for i, p in enumerate(model.parameters()):
        buf = loop.opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            arrays[f"opt/momentum/{i}"] = buf.detach().numpy()
    if loop.state.metrics:
        arrays["metrics"] = np.array(
            [
                [m.epoch, m.train_loss, m.std_acc, m.robust_acc]
                for m in loop.state.metrics
            ],
            dtype=np.float64,
        )
    meta = {
        "epoch": loop.state.epoch,
        "config": config.to_dict(),
        "model_config": model.config.to_dict(),
        "rng": {
            "order": json.dumps(loop.order_rng.bit_generator.state),
            "pair": json.dumps(loop.pair_rng.bit_generator.state),
            "alpha": json.dumps(loop.alpha_rng.bit_generator.state),
        },
    }
    write_container(path, "train-state", meta, arrays)


def load_train_state(path) -> tuple[ClassifierModel, "_Loop", TrainConfig]:
    from advlab.classifier import ClassifierConfig

    kind, meta, arrays = read_container(path)
    if kind != "train-state":
        raise CheckpointError(f"{path}: not a training-state container")
    config = TrainConfig.from_dict(meta["config"])
    model = ClassifierModel(ClassifierConfig.from_dict(meta["model_config"]))
    floats = {a.dtype for k, a in arrays.items()
              if k.startswith("model/") and a.dtype.kind == "f"}
    if floats == {np.dtype(np.float64)}:
        model.double()
    state = {
        name[len("model/"):]: torch.as_tensor(arr.copy())
        for name, arr in arrays.items() if name.startswith("model/")
    }
    model.load_state_dict(state)
    loop = _Loop(model, config)
    for i, p in enumerate(model.parameters()):
        key = f"opt/momentum/{i}"
        if key in arrays:
            loop.opt.state[p] = {
                "momentum_buffer": torch.as_tensor(arrays[key].copy())
            }
    loop.order_rng.bit_generator.state = json.loads(meta["rng"]["order"])
    loop.pair_rng.bit_generator.state = json.loads(meta["rng"]["pair"])
    loop.alpha_rng.bit_generator.state = json.loads(meta["rng"]["alpha"])
    loop.state.epoch = int(meta["epoch"])
    if "metrics" in arrays:
        loop.state.metrics = [
            EpochMetrics(int(row[0]), row[1], row[2], row[3])
            for row in arrays["metrics"]
        ]
    return model, loop, config
