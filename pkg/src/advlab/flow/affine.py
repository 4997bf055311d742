"""Closed-form invertible generator: x = sigmoid(A z + b).

A is a seeded well-conditioned matrix, so encoding, decoding, and the
log-determinant all have exact formulas. Useful as an analytically
checkable generator for synthetic exact-manifold datasets and oracle
tests; exposes the same surface the attack code expects from a flow.
"""

from __future__ import annotations

import math

import torch

from advlab.errors import ConfigurationError
from advlab.flow.model import LatentCode, LogDensity
from advlab.rng import torch_rng


class AffineSigmoidGenerator:
    def __init__(self, input_shape: tuple[int, int, int], seed: int = 0,
                 scale: float = 1.0, dtype: torch.dtype = torch.float64):
        self.input_shape = tuple(input_shape)
        d = int(torch.tensor(self.input_shape).prod())
        self.latent_shapes = [self.input_shape]
        self.seed = seed
        self.scale = scale
        gen = torch_rng(seed, "affine-generator")
        raw = torch.randn(d, d, generator=gen, dtype=torch.float64)
        q, _ = torch.linalg.qr(raw)
        # Orthogonal basis with mildly varied singular values: invertible
        # and well conditioned for any seed.
        sv = torch.linspace(0.5, 1.5, d, dtype=torch.float64)
        # Contiguous so a save/load round trip reproduces the exact same
        # memory layout (and therefore bitwise-identical matmul results).
        self.matrix = ((q * sv).to(dtype) * scale).contiguous()
        self.bias = 0.1 * torch.randn(d, generator=gen, dtype=torch.float64).to(dtype)
        self.matrix_inv = torch.linalg.inv(self.matrix)
        self._logdet_a = float(torch.slogdet(self.matrix)[1])
        self.initialized = True

    @property
    def dtype(self):
        return self.matrix.dtype

    def to(self, dtype: torch.dtype) -> "AffineSigmoidGenerator":
        out = AffineSigmoidGenerator.__new__(AffineSigmoidGenerator)
        out.__dict__.update(self.__dict__)
        out.matrix = self.matrix.to(dtype)
        out.bias = self.bias.to(dtype)
        out.matrix_inv = self.matrix_inv.to(dtype)
        return out

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(x.shape)} does not match {self.input_shape}"
            )

    def forward_transform(self, x: torch.Tensor) -> tuple[LatentCode, torch.Tensor]:
        self._check_input(x)
        flat = x.reshape(x.shape[0], -1)
        pre = torch.log(flat) - torch.log1p(-flat)
        z = (pre - self.bias) @ self.matrix_inv.T
        logdet = (-torch.log(flat) - torch.log1p(-flat)).sum(dim=1) - self._logdet_a
        return LatentCode([z.reshape(-1, *self.input_shape)]), logdet

    def inverse_transform(self, code: LatentCode) -> torch.Tensor:
        z = code.flatten()
        x = torch.sigmoid(z @ self.matrix.T + self.bias)
        return x.reshape(-1, *self.input_shape)

    def decode_flat(self, flat: torch.Tensor) -> torch.Tensor:
        return self.inverse_transform(
            LatentCode([flat.reshape(-1, *self.input_shape)])
        )

    def prior_log_prob(self, code: LatentCode) -> torch.Tensor:
        flat = code.flatten()
        return -0.5 * (flat**2).sum(dim=1) - 0.5 * flat.shape[1] * math.log(2 * math.pi)

    def log_prob(self, x: torch.Tensor) -> LogDensity:
        code, logdet = self.forward_transform(x)
        prior = self.prior_log_prob(code)
        return LogDensity(
            log_prob=prior + logdet, log_det_jacobian=logdet, prior_log_prob=prior
        )

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        d = int(torch.tensor(self.input_shape).prod())
        z = torch.randn(n, d, generator=generator, dtype=self.dtype)
        return self.decode_flat(z)
