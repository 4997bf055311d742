"""Multi-scale invertible generator with exact likelihoods.

Architecture per level: 2x2 squeeze (when spatial dims allow), then
`steps_per_level` flow steps of actnorm -> invertible 1x1 convolution ->
affine coupling, then a channel split that sends half the activations to
the latent code (all of them at the last level). The latent prior is an
unconditional standard normal per level.

Conventions: `forward_transform` maps images to latent codes and returns
the log-determinant of that direction; sampling/decoding negates it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from advlab.errors import ConfigurationError, NumericsError
from advlab.flow.layers import (
    ActNorm,
    AffineCoupling,
    InvertibleConv1x1,
    squeeze2x2,
    unsqueeze2x2,
)
from advlab.rng import seed_for, torch_rng


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 2
    steps_per_level: int = 4
    hidden_width: int = 64
    input_shape: tuple[int, int, int] = (3, 8, 8)
    dequantization_noise: bool = True
    # Optional logit preprocessing. With margin 0 the decoder ends in a
    # plain sigmoid, so decoded images always land strictly inside (0, 1).
    logit_input: bool = False
    logit_margin: float = 0.0

    def __post_init__(self):
        if self.levels < 1 or self.steps_per_level < 1:
            raise ConfigurationError("levels and steps_per_level must be >= 1")
        if self.hidden_width < 1:
            raise ConfigurationError("hidden_width must be positive")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ConfigurationError(f"bad input_shape {self.input_shape}")
        if not (0.0 <= self.logit_margin < 0.5):
            raise ConfigurationError("logit_margin must be in [0, 0.5)")
        c, h, w = self.input_shape
        if (c * h * w) % (4 ** (self.levels - 1)) != 0:
            raise ConfigurationError(
                f"input size {c * h * w} not divisible by 4^(levels-1)"
            )
        latent_schedule(self)  # raises if the squeeze/split plan is illegal

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "steps_per_level": self.steps_per_level,
            "hidden_width": self.hidden_width,
            "input_shape": list(self.input_shape),
            "dequantization_noise": self.dequantization_noise,
            "logit_input": self.logit_input,
            "logit_margin": self.logit_margin,
        }

    @staticmethod
    def from_dict(d: dict) -> "FlowConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return FlowConfig(**d)


def latent_schedule(config: FlowConfig) -> list[tuple[int, int, int]]:
    """Per-level latent shapes implied by the squeeze/split bookkeeping."""
    c, h, w = config.input_shape
    shapes = []
    for level in range(config.levels):
        if h > 1 and w > 1:
            if h % 2 or w % 2:
                raise ConfigurationError(
                    f"level {level + 1}: cannot 2x2-squeeze {h}x{w}"
                )
            c, h, w = 4 * c, h // 2, w // 2
        if c < 2:
            raise ConfigurationError(
                f"level {level + 1}: coupling needs >= 2 channels, got {c}"
            )
        if level < config.levels - 1:
            if c % 2:
                raise ConfigurationError(
                    f"level {level + 1}: cannot split odd channel count {c}"
                )
            shapes.append((c // 2, h, w))
            c = c - c // 2
        else:
            shapes.append((c, h, w))
    return shapes


@dataclass
class LatentCode:
    """Ordered per-level latent tensors (z_1, ..., z_L), batch-first."""

    per_level: list[torch.Tensor]

    @property
    def batch_size(self) -> int:
        return self.per_level[0].shape[0]

    @property
    def total_dim(self) -> int:
        return sum(z[0].numel() for z in self.per_level)

    def flatten(self) -> torch.Tensor:
        return torch.cat([z.reshape(z.shape[0], -1) for z in self.per_level], dim=1)

    def map(self, fn) -> "LatentCode":
        return LatentCode([fn(z) for z in self.per_level])

    def detach(self) -> "LatentCode":
        return self.map(lambda z: z.detach())


def split_levels(flat: torch.Tensor, config: FlowConfig) -> LatentCode:
    """Slice a flat (B, d) latent into per-level tensors."""
    shapes = latent_schedule(config)
    total = sum(c * h * w for c, h, w in shapes)
    if flat.ndim != 2 or flat.shape[1] != total:
        raise ConfigurationError(
            f"flat latent has {tuple(flat.shape)}, expected (*, {total})"
        )
    out, offset = [], 0
    for c, h, w in shapes:
        n = c * h * w
        out.append(flat[:, offset : offset + n].reshape(-1, c, h, w))
        offset += n
    return LatentCode(out)


def merge_levels(code: LatentCode) -> torch.Tensor:
    return code.flatten()


class _FlowStep(nn.Module):
    def __init__(self, channels, hidden_width, *, identity_init, seed):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.mix = InvertibleConv1x1(channels, identity=identity_init, seed=seed)
        self.coupling = AffineCoupling(channels, hidden_width, seed=seed + 1)

    def forward(self, x, logdet):
        x, logdet = self.actnorm(x, logdet)
        x, logdet = self.mix(x, logdet)
        return self.coupling(x, logdet)

    def inverse(self, y):
        y = self.coupling.inverse(y)
        y = self.mix.inverse(y)
        return self.actnorm.inverse(y)


class FlowModel(nn.Module):
    def __init__(self, config: FlowConfig, *, identity_init: bool = False,
                 init_seed: int = 0):
        super().__init__()
        self.config = config
        self.latent_shapes = latent_schedule(config)
        self._squeeze_at = []
        levels = nn.ModuleList()
        c, h, w = config.input_shape
        for level in range(config.levels):
            do_squeeze = h > 1 and w > 1
            self._squeeze_at.append(do_squeeze)
            if do_squeeze:
                c, h, w = 4 * c, h // 2, w // 2
            steps = nn.ModuleList(
                _FlowStep(
                    c, config.hidden_width, identity_init=identity_init,
                    seed=seed_for(init_seed, "mix", level, k),
                )
                for k in range(config.steps_per_level)
            )
            levels.append(steps)
            if level < config.levels - 1:
                c = c - c // 2
        self.levels = levels

    # -- initialization ----------------------------------------------------

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.config.input_shape

    @property
    def initialized(self) -> bool:
        return all(bool(m.initialized) for m in self.modules()
                   if isinstance(m, ActNorm))

    def initialize_identity(self):
        for m in self.modules():
            if isinstance(m, ActNorm):
                m.init_identity()
        return self

    @torch.no_grad()
    def initialize_from_data(self, x: torch.Tensor):
        """Data-dependent actnorm init: run the batch through and standardize
        the input of each actnorm."""
        self._check_shape(x)
        h = self._preprocess(x, torch.zeros(x.shape[0], dtype=x.dtype))[0]
        for level, steps in enumerate(self.levels):
            if self._squeeze_at[level]:
                h = squeeze2x2(h)
            for step in steps:
                step.actnorm.init_from_data(h)
                h, _ = step(h, torch.zeros(h.shape[0], dtype=h.dtype))
            if level < len(self.levels) - 1:
                keep = h.shape[1] - h.shape[1] // 2
                h = h[:, :keep]
        return self

    # -- core bijection ----------------------------------------------------

    def _check_shape(self, x: torch.Tensor):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(x.shape)} does not match "
                f"{self.config.input_shape}"
            )

    def _check_input(self, x: torch.Tensor):
        self._check_shape(x)
        if not self.initialized:
            raise ConfigurationError(
                "actnorm not initialized; call initialize_identity() or "
                "initialize_from_data() first"
            )

    def _preprocess(self, x, logdet):
        if not self.config.logit_input:
            return x, logdet
        m = self.config.logit_margin
        u = m + (1.0 - 2.0 * m) * x
        # Keep u strictly inside (0, 1): pixels exactly at the range boundary
        # would otherwise map to +/-inf under the logit.
        tiny = torch.finfo(u.dtype).tiny
        u = u.clamp(tiny, 1.0 - torch.finfo(u.dtype).eps)
        y = torch.log(u) - torch.log1p(-u)
        per_elem = math.log(1.0 - 2.0 * m) - torch.log(u) - torch.log1p(-u)
        return y, logdet + per_elem.sum(dim=(1, 2, 3))

    def _postprocess(self, y):
        if not self.config.logit_input:
            return y
        m = self.config.logit_margin
        return (torch.sigmoid(y) - m) / (1.0 - 2.0 * m)

    def forward_transform(self, x: torch.Tensor) -> tuple[LatentCode, torch.Tensor]:
        """Image batch -> (latent code, per-sample log|det| of this direction)."""
        self._check_input(x)
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        h, logdet = self._preprocess(x, logdet)
        zs = []
        layer_index = 0
        for level, steps in enumerate(self.levels):
            if self._squeeze_at[level]:
                h = squeeze2x2(h)
            for step in steps:
                h, logdet = step(h, logdet)
                layer_index += 1
                if not torch.isfinite(h).all():
                    raise NumericsError(
                        f"non-finite activations after flow step {layer_index}",
                        layer=layer_index,
                    )
            if level < len(self.levels) - 1:
                split = h.shape[1] // 2
                zs.append(h[:, h.shape[1] - split :])
                h = h[:, : h.shape[1] - split]
            else:
                zs.append(h)
        if not torch.isfinite(logdet).all():
            raise NumericsError("non-finite log-determinant", layer=layer_index)
        return LatentCode(zs), logdet

    def inverse_transform(self, code: LatentCode) -> torch.Tensor:
        """Latent code -> image batch (the generator direction)."""
        self._check_code(code)
        h = None
        for level in reversed(range(len(self.levels))):
            z = code.per_level[level]
            h = z if h is None else torch.cat([h, z], dim=1)
            for step in reversed(self.levels[level]):
                h = step.inverse(h)
                if not torch.isfinite(h).all():
                    raise NumericsError(
                        "non-finite activations during inversion", layer=level
                    )
            if self._squeeze_at[level]:
                h = unsqueeze2x2(h)
        return self._postprocess(h)

    def _check_code(self, code: LatentCode):
        if len(code.per_level) != len(self.latent_shapes):
            raise ConfigurationError(
                f"latent code has {len(code.per_level)} levels, "
                f"expected {len(self.latent_shapes)}"
            )
        for z, shape in zip(code.per_level, self.latent_shapes):
            if tuple(z.shape[1:]) != shape:
                raise ConfigurationError(
                    f"latent level shape {tuple(z.shape[1:])} != {shape}"
                )

    def decode_flat(self, flat: torch.Tensor) -> torch.Tensor:
        return self.inverse_transform(split_levels(flat, self.config))

    # -- densities ---------------------------------------------------------

    def prior_log_prob(self, code: LatentCode) -> torch.Tensor:
        flat = code.flatten()
        return -0.5 * (flat**2).sum(dim=1) - 0.5 * flat.shape[1] * math.log(2 * math.pi)

    def log_prob(self, x: torch.Tensor) -> "LogDensity":
        code, logdet = self.forward_transform(x)
        prior = self.prior_log_prob(code)
        return LogDensity(
            log_prob=prior + logdet, log_det_jacobian=logdet, prior_log_prob=prior
        )

    def sample(self, n: int, generator: torch.Generator | None = None,
               temperature: float = 1.0) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        zs = []
        for c, h, w in self.latent_shapes:
            zs.append(
                temperature
                * torch.randn(n, c, h, w, generator=generator, dtype=dtype)
            )
        return self.inverse_transform(LatentCode(zs))


@dataclass
class LogDensity:
    """Per-sample change-of-variables decomposition:
    log_prob = prior_log_prob + log_det_jacobian."""

    log_prob: torch.Tensor
    log_det_jacobian: torch.Tensor
    prior_log_prob: torch.Tensor


def randomize_parameters(flow: FlowModel, seed: int, scale: float = 0.1) -> FlowModel:
    """Give a flow small random (seeded) parameters, for use as a fixed
    synthetic generator. Keeps actnorm initialized."""
    gen = torch_rng(seed, "flow-randomize")
    with torch.no_grad():
        for name, p in sorted(flow.named_parameters()):
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            if name.endswith("log_s") or "actnorm.log_scale" in name:
                p.add_(0.25 * scale * noise)
            else:
                p.add_(scale * noise)
    flow.initialize_identity()  # marks actnorm usable; values then perturbed
    gen2 = torch_rng(seed, "flow-randomize-actnorm")
    with torch.no_grad():
        for m in flow.modules():
            if isinstance(m, ActNorm):
                m.log_scale.add_(
                    0.25 * scale * torch.randn(m.log_scale.shape, generator=gen2,
                                               dtype=m.log_scale.dtype)
                )
                m.bias.add_(
                    scale * torch.randn(m.bias.shape, generator=gen2,
                                        dtype=m.bias.dtype)
                )
    return flow


def fit_mle(flow: FlowModel, images: torch.Tensor, *, epochs: int,
            batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
            weight_decay: float = 0.0) -> list[float]:
    """Maximum-likelihood training; returns the per-epoch mean NLL (nats).

    Discrete pixel data is dequantized with uniform noise in [0, 1/256)
    when the config asks for it; the noise only exists here, so encoding
    outside training stays deterministic.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigurationError("fit_mle needs a non-empty (N, C, H, W) dataset")
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if not flow.initialized:
        flow.initialize_from_data(images[: min(256, images.shape[0])])
    opt = torch.optim.Adam(flow.parameters(), lr=lr, weight_decay=weight_decay)
    order_rng = torch_rng(seed, "fit-mle-order")
    noise_rng = torch_rng(seed, "fit-mle-dequant")
    n = images.shape[0]
    trace = []
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=order_rng)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            batch = images[perm[start : start + batch_size]]
            if flow.config.dequantization_noise:
                u = torch.rand(batch.shape, generator=noise_rng, dtype=batch.dtype)
                batch = (batch * 255.0 + u) / 256.0
            nll = -flow.log_prob(batch).log_prob.mean()
            if not torch.isfinite(nll):
                raise NumericsError(
                    f"NaN/inf loss at epoch {epoch}, batch {start // batch_size}",
                    epoch=epoch, batch=start // batch_size,
                )
            opt.zero_grad()
            nll.backward()
            opt.step()
            total += float(nll.detach()) * batch.shape[0]
            count += batch.shape[0]
        trace.append(total / count)
    return trace
