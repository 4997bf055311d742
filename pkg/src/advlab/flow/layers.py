"""Invertible building blocks: actnorm, LU-parameterized 1x1 convolution,
affine coupling, and the 2x2 squeeze reshaping.

Every layer maps (x, per-sample log-det accumulator) -> (y, accumulator) in
the image->latent direction and provides the exact inverse. Log-scales in
the coupling are hard-clamped to [-LOGSCALE_CLAMP, LOGSCALE_CLAMP]; the
clamp is applied identically in both directions, so it is part of the
bijection rather than a training-only trick.
"""

import numpy as np
import scipy.linalg
import torch
from torch import nn

LOGSCALE_CLAMP = 7.0


class ActNorm(nn.Module):
    """Per-channel affine y = exp(log_scale) * x + bias.

    Requires explicit initialization (identity or data-dependent on a
    batch) before use, so determinism is testable.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def init_identity(self):
        with torch.no_grad():
            self.log_scale.zero_()
            self.bias.zero_()
        self.initialized.fill_(True)

    def init_from_data(self, x: torch.Tensor):
        # Standardize per channel: y = (x - mean) / std.
        with torch.no_grad():
            mean = x.mean(dim=(0, 2, 3))
            std = x.std(dim=(0, 2, 3)).clamp_min(1e-6)
            self.log_scale.copy_(-torch.log(std))
            self.bias.copy_(-mean / std)
        self.initialized.fill_(True)

    def _view(self, p: torch.Tensor) -> torch.Tensor:
        return p.view(1, -1, 1, 1)

    def forward(self, x, logdet):
        y = x * self._view(torch.exp(self.log_scale)) + self._view(self.bias)
        pixels = x.shape[2] * x.shape[3]
        return y, logdet + pixels * self.log_scale.sum()

    def inverse(self, y):
        return (y - self._view(self.bias)) * self._view(torch.exp(-self.log_scale))


class InvertibleConv1x1(nn.Module):
    """Channel-mixing 1x1 convolution with LU-parameterized weight.

    W = P (L + I) (U + diag(sign_s * exp(log_s))) with P a fixed
    permutation, so log|det W| = sum(log_s) exactly.
    """

    def __init__(self, channels: int, *, identity: bool = False, seed: int = 0):
        super().__init__()
        self.channels = channels
        if identity:
            w = np.eye(channels)
        else:
            rng = np.random.default_rng(seed)
            q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
            w = q
        p, lower, upper = scipy.linalg.lu(w)
        s = np.diag(upper).copy()
        upper = np.triu(upper, k=1)
        dt = torch.get_default_dtype()
        self.register_buffer("perm", torch.as_tensor(p, dtype=dt))
        self.register_buffer("sign_s", torch.as_tensor(np.sign(s), dtype=dt))
        self.lower = nn.Parameter(torch.as_tensor(np.tril(lower, k=-1), dtype=dt))
        self.upper = nn.Parameter(torch.as_tensor(upper, dtype=dt))
        self.log_s = nn.Parameter(torch.as_tensor(np.log(np.abs(s)), dtype=dt))
        mask = torch.ones(channels, channels)
        self.register_buffer("lower_mask", torch.tril(mask, -1))
        self.register_buffer("eye", torch.eye(channels))

    def weight(self) -> torch.Tensor:
        lower = self.lower * self.lower_mask + self.eye
        upper = self.upper * self.lower_mask.T + torch.diag(
            self.sign_s * torch.exp(self.log_s)
        )
        return self.perm @ lower @ upper

    def forward(self, x, logdet):
        y = torch.einsum("ij,bjhw->bihw", self.weight(), x)
        pixels = x.shape[2] * x.shape[3]
        return y, logdet + pixels * self.log_s.sum()

    def inverse(self, y):
        w_inv = torch.linalg.inv(self.weight())
        return torch.einsum("ij,bjhw->bihw", w_inv, y)


class AffineCoupling(nn.Module):
    """Affine coupling: the first c//2 channels parameterize an elementwise
    affine map of the rest. The conditioner's final convolution is
    zero-initialized so a fresh layer is exactly the identity.
    """

    def __init__(self, channels: int, hidden_width: int, *, seed: int = 0):
        super().__init__()
        self.split = channels // 2
        transformed = channels - self.split
        self.net = nn.Sequential(
            nn.Conv2d(self.split, hidden_width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden_width, hidden_width, 1),
            nn.ReLU(),
            nn.Conv2d(hidden_width, 2 * transformed, 3, padding=1),
        )
        # Seeded He init for the hidden convolutions (torch's default init
        # draws from the process-global RNG, which would make two flows
        # built from the same config differ); the final convolution is
        # zeroed so a fresh layer is exactly the identity.
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for conv in (self.net[0], self.net[2]):
                fan_in = conv.weight.shape[1:].numel()
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen,
                                dtype=conv.weight.dtype)
                    * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            self.net[-1].weight.zero_()
            self.net[-1].bias.zero_()

    def _scale_shift(self, x1):
        raw_scale, shift = self.net(x1).chunk(2, dim=1)
        return raw_scale.clamp(-LOGSCALE_CLAMP, LOGSCALE_CLAMP), shift

    def forward(self, x, logdet):
        x1, x2 = x[:, : self.split], x[:, self.split :]
        log_scale, shift = self._scale_shift(x1)
        y2 = x2 * torch.exp(log_scale) + shift
        return torch.cat([x1, y2], dim=1), logdet + log_scale.sum(dim=(1, 2, 3))

    def inverse(self, y):
        y1, y2 = y[:, : self.split], y[:, self.split :]
        log_scale, shift = self._scale_shift(y1)
        x2 = (y2 - shift) * torch.exp(-log_scale)
        return torch.cat([y1, x2], dim=1)


def squeeze2x2(x: torch.Tensor) -> torch.Tensor:
    """Space-to-depth: (B, C, H, W) -> (B, 4C, H/2, W/2)."""
    b, c, h, w = x.shape
    x = x.view(b, c, h // 2, 2, w // 2, 2)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(b, 4 * c, h // 2, w // 2)


def unsqueeze2x2(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    x = x.view(b, c // 4, 2, 2, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, c // 4, 2 * h, 2 * w)
