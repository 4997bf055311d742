"""Datasets, synthetic exact-manifold generation, and checkpointing.

The synthetic generator is an invertible map built from a seed alone, so
every generated image carries its exact latent preimage: x_i = G(z_i)
holds by construction, which is the precondition for all on-manifold
oracle tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from advlab.classifier import ClassifierConfig, ClassifierModel
from advlab.container import read_container, write_container
from advlab.errors import CheckpointError, ConfigurationError, DataFormatError
from advlab.flow.affine import AffineSigmoidGenerator
from advlab.flow.model import FlowConfig, FlowModel, randomize_parameters
from advlab.rng import torch_rng

CHECKPOINT_VERSION = 1


@dataclass
class TensorDataset:
    images: np.ndarray  # (n, c, h, w) in [0, 1]
    labels: np.ndarray  # (n,) ints in [0, num_classes)
    latents: np.ndarray | None = None  # (n, d) exact preimages, when known

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(
                f"images must be (n, c, h, w), got {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError("labels length does not match images")
        bad = np.where((self.images < 0.0) | (self.images > 1.0))
        if bad[0].size:
            raise DataFormatError(
                f"pixel out of [0, 1] at sample index {int(bad[0][0])}"
            )
        if self.latents is not None:
            self.latents = np.asarray(self.latents, dtype=np.float64)
            d = int(np.prod(self.images.shape[1:]))
            if self.latents.shape != (self.images.shape[0], d):
                raise DataFormatError(
                    f"latents must be (n, {d}), got {self.latents.shape}"
                )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def images_t(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.images, dtype=dtype)

    def labels_t(self) -> torch.Tensor:
        return torch.as_tensor(self.labels)

    def latents_t(self, dtype=torch.float64) -> torch.Tensor:
        if self.latents is None:
            raise DataFormatError("dataset has no stored latents")
        return torch.as_tensor(self.latents, dtype=dtype)

    def subset(self, indices) -> "TensorDataset":
        idx = np.asarray(indices)
        return TensorDataset(
            self.images[idx], self.labels[idx],
            None if self.latents is None else self.latents[idx],
        )


def save_tensor_dataset(dataset: TensorDataset, path):
    arrays = {"images": dataset.images, "labels": dataset.labels}
    if dataset.latents is not None:
        arrays["latents"] = dataset.latents
    write_container(path, "dataset", {"has_latents": dataset.latents is not None},
                    arrays)


def load_tensor_dataset(path) -> TensorDataset:
    kind, meta, arrays = read_container(path)
    if kind != "dataset":
        raise DataFormatError(f"{path}: expected a dataset container, got {kind!r}")
    return TensorDataset(
        arrays["images"], arrays["labels"], arrays.get("latents")
    )


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model, path, *, seed: int = 0, extra_meta: dict | None = None):
    if isinstance(model, FlowModel):
        kind, config = "flow", model.config.to_dict()
    elif isinstance(model, ClassifierModel):
        kind, config = "classifier", model.config.to_dict()
    elif isinstance(model, AffineSigmoidGenerator):
        write_container(
            path, "checkpoint",
            {
                "model": "affine-generator", "version": CHECKPOINT_VERSION,
                "seed": seed,
                "config": {
                    "input_shape": list(model.input_shape),
                    "seed": model.seed, "scale": model.scale,
                },
                **(extra_meta or {}),
            },
            {"matrix": model.matrix.numpy(), "bias": model.bias.numpy()},
        )
        return
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model)}")
    arrays = {
        name: tensor.detach().numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = {
        "model": kind, "version": CHECKPOINT_VERSION, "seed": seed,
        "config": config, **(extra_meta or {}),
    }
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path, expect: str | None = None):
    """Rebuild a model from its checkpoint. `expect` guards against loading
    the wrong model kind ("flow", "classifier", "affine-generator")."""
    kind, meta, arrays = read_container(path)
    if kind != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint container ({kind!r})")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {meta.get('version')}"
        )
    model_kind = meta.get("model")
    if expect is not None and model_kind != expect:
        raise CheckpointError(
            f"{path}: expected a {expect} checkpoint, found {model_kind}"
        )
    if model_kind == "affine-generator":
        cfg = meta["config"]
        gen = AffineSigmoidGenerator(
            tuple(cfg["input_shape"]), seed=cfg["seed"], scale=cfg["scale"]
        )
        gen.matrix = torch.as_tensor(arrays["matrix"].copy())
        gen.bias = torch.as_tensor(arrays["bias"].copy())
        gen.matrix_inv = torch.linalg.inv(gen.matrix)
        gen._logdet_a = float(torch.slogdet(gen.matrix)[1])
        return gen
    if model_kind == "flow":
        model = FlowModel(FlowConfig.from_dict(meta["config"]))
    elif model_kind == "classifier":
        model = ClassifierModel(ClassifierConfig.from_dict(meta["config"]))
    else:
        raise CheckpointError(f"{path}: unknown model kind {model_kind!r}")
    float_dtypes = {a.dtype for a in arrays.values() if a.dtype.kind == "f"}
    if float_dtypes == {np.dtype(np.float64)}:
        model.double()
    state = {}
    for name, tensor in model.state_dict().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        state[name] = torch.as_tensor(arrays[name].copy())
    model.load_state_dict(state)
    return model


# -- synthetic exact-manifold data ----------------------------------------


@dataclass(frozen=True)
class SyntheticManifoldSpec:
    """Recipe for a dataset where every image has a stored exact latent
    preimage under a seeded invertible generator.

    Labels follow the sign pattern of the leading latent coordinates
    (n_classes must be a power of two). latent_margin > 0 rejects samples
    whose labeling coordinates are within the margin of zero, giving the
    classes a guaranteed latent-space separation.
    """

    generator_kind: str = "flow"  # "flow" or "affine"
    input_shape: tuple[int, int, int] = (3, 8, 8)
    n_classes: int = 2
    n_samples: int = 1000
    seed: int = 0
    latent_margin: float = 0.0
    flow_levels: int = 2
    flow_steps: int = 2
    flow_width: int = 32
    generator_scale: float = 0.1

    @property
    def latent_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def __post_init__(self):
        if self.generator_kind not in ("flow", "affine"):
            raise ConfigurationError(
                f"unknown generator kind {self.generator_kind!r}"
            )
        m = self.n_classes.bit_length() - 1
        if self.n_classes < 2 or 2**m != self.n_classes:
            raise ConfigurationError("n_classes must be a power of two >= 2")
        if 2**m > self.latent_dim:
            raise ConfigurationError("more classes than latent sign bits")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be positive")

    @property
    def label_bits(self) -> int:
        return self.n_classes.bit_length() - 1

    def to_dict(self) -> dict:
        return {
            "generator_kind": self.generator_kind,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "latent_margin": self.latent_margin,
            "flow_levels": self.flow_levels,
            "flow_steps": self.flow_steps,
            "flow_width": self.flow_width,
            "generator_scale": self.generator_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "SyntheticManifoldSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return SyntheticManifoldSpec(**d)


def build_generator(spec: SyntheticManifoldSpec):
    """The fixed seeded generator implied by a synthetic spec."""
    if spec.generator_kind == "affine":
        return AffineSigmoidGenerator(
            spec.input_shape, seed=spec.seed, scale=1.0
        )
    config = FlowConfig(
        levels=spec.flow_levels, steps_per_level=spec.flow_steps,
        hidden_width=spec.flow_width, input_shape=spec.input_shape,
        dequantization_noise=False, logit_input=True, logit_margin=0.0,
    )
    flow = FlowModel(config, identity_init=True).double()
    return randomize_parameters(flow, spec.seed, scale=spec.generator_scale)


def labels_from_latents(flat_z: torch.Tensor, bits: int) -> torch.Tensor:
    label = torch.zeros(flat_z.shape[0], dtype=torch.long)
    for b in range(bits):
        label = label * 2 + (flat_z[:, b] > 0).long()
    return label


def synth_manifold_dataset(
    spec: SyntheticManifoldSpec,
) -> tuple[TensorDataset, object]:
    """Generate (dataset-with-latents, generator). Reconstruction
    G(z_i) = x_i holds to numerical round-trip precision by construction."""
    generator = build_generator(spec)
    gen = torch_rng(spec.seed, "synth-latents")
    collected_z, collected = [], 0
    while collected < spec.n_samples:
        z = torch.randn(max(spec.n_samples, 256), spec.latent_dim,
                        generator=gen, dtype=torch.float64)
        if spec.latent_margin > 0:
            keep = (z[:, : spec.label_bits].abs() > spec.latent_margin).all(dim=1)
            z = z[keep]
        collected_z.append(z)
        collected += z.shape[0]
    flat_z = torch.cat(collected_z)[: spec.n_samples]
    with torch.no_grad():
        x = generator.decode_flat(flat_z)
    labels = labels_from_latents(flat_z, spec.label_bits)
    dataset = TensorDataset(
        x.numpy(), labels.numpy(), flat_z.numpy()
    )
    return dataset, generator
