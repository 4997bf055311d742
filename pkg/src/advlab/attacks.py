"""Gradient-based attacks in image space, latent space, and both at once.

One engine drives every attack: each iteration decodes the perturbed
latent (when a latent budget is active), adds the image-space
perturbation, evaluates the loss at that single point, and updates both
perturbations simultaneously from the resulting gradients with sign
steps (normalized-gradient steps for the L2 image norm). Each
perturbation is projected onto its own ball after every step and the
classifier input is clipped to the valid image range.

The printed update rule assigns fresh step-sized signs each iteration
without accumulation; as in standard PGD practice the recursion here
accumulates and projects, lambda_{k+1} = proj(lambda_k + step * sign(g)),
and likewise for delta. The specialization with a zero latent budget is
exactly PGD; a zero image budget gives the on-manifold attack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from advlab.classifier import TargetSpec, ce_loss
from advlab.errors import ConfigurationError, NumericsError
from advlab.flow.model import LatentCode
from advlab.rng import torch_rng


@dataclass(frozen=True)
class ThreatModel:
    """Attack budget record.

    norm applies to the image-space perturbation delta; the latent
    perturbation lambda is always L-infinity bounded. A zero budget
    disables the corresponding space.
    """

    norm: str = "inf"  # "inf" or "2"
    image_eps: float = 0.0
    image_step: float = 0.0
    latent_eta: float = 0.0
    latent_step: float = 0.0
    iterations: int = 10
    random_start: bool = False
    clip_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("inf", "2"):
            raise ConfigurationError(f"unsupported norm {self.norm!r}")
        if self.image_eps < 0 or self.latent_eta < 0:
            raise ConfigurationError("budgets must be non-negative")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.image_eps > 0:
            if self.image_step <= 0:
                raise ConfigurationError("image_step must be > 0 when image_eps > 0")
            if self.image_step > self.image_eps:
                raise ConfigurationError("image_step must not exceed image_eps")
        if self.latent_eta > 0:
            if self.latent_step <= 0:
                raise ConfigurationError("latent_step must be > 0 when latent_eta > 0")
            if self.latent_step > self.latent_eta:
                raise ConfigurationError("latent_step must not exceed latent_eta")

    def to_dict(self) -> dict:
        return {
            "norm": self.norm,
            "image_eps": self.image_eps,
            "image_step": self.image_step,
            "latent_eta": self.latent_eta,
            "latent_step": self.latent_step,
            "iterations": self.iterations,
            "random_start": self.random_start,
            "clip_range": list(self.clip_range),
        }

    @staticmethod
    def from_dict(d: dict) -> "ThreatModel":
        d = dict(d)
        d["clip_range"] = tuple(d.get("clip_range", (0.0, 1.0)))
        return ThreatModel(**d)


@dataclass
class AdversarialExample:
    """Attack output: adversarial image, decomposed perturbations, and the
    per-iteration per-sample loss trace (entry 0 is the pre-attack loss)."""

    x_adv: torch.Tensor
    delta: torch.Tensor
    lam: torch.Tensor | None  # flat latent perturbation, None when eta == 0
    loss_trace: torch.Tensor  # (iterations + 1, batch)
    success: torch.Tensor  # bool per sample


def clip_to_range(x: torch.Tensor, lo: float = 0.0, hi: float = 1.0) -> torch.Tensor:
    return x.clamp(lo, hi)


def _project_delta(delta: torch.Tensor, threat: ThreatModel) -> torch.Tensor:
    eps = threat.image_eps
    if threat.norm == "inf":
        return delta.clamp(-eps, eps)
    flat = delta.reshape(delta.shape[0], -1)
    norms = flat.norm(dim=1, keepdim=True)
    factor = torch.where(norms > eps, eps / norms.clamp_min(1e-12),
                         torch.ones_like(norms))
    return (flat * factor).reshape(delta.shape)


def _delta_step(delta: torch.Tensor, grad: torch.Tensor,
                threat: ThreatModel) -> torch.Tensor:
    if threat.norm == "inf":
        return delta + threat.image_step * torch.sign(grad)
    flat = grad.reshape(grad.shape[0], -1)
    norms = flat.norm(dim=1, keepdim=True)
    # Zero gradient: leave the perturbation unchanged this iteration.
    direction = torch.where(norms > 0, flat / norms.clamp_min(1e-12),
                            torch.zeros_like(flat))
    return delta + threat.image_step * direction.reshape(delta.shape)


def joint_attack(model, flow, x: torch.Tensor | None, target: TargetSpec,
                 threat: ThreatModel, *, z: LatentCode | None = None,
                 attack_levels: list[int] | None = None, seed: int = 0,
                 best_iterate: bool = False, clip_in_loss: bool = True,
                 final_clip: bool = True) -> AdversarialExample:
    """Shared engine for PGD / on-manifold PGD / joint-space attacks.

    `attack_levels` restricts the latent perturbation to the given
    0-based levels (default: all). With latent_eta == 0 the flow is
    bypassed entirely, so the iterates coincide bitwise with plain PGD.
    """
    use_latent = threat.latent_eta > 0
    use_image = threat.image_eps > 0
    lo, hi = threat.clip_range

    if use_latent:
        if flow is None:
            raise ConfigurationError("latent budget requires a flow model")
        if z is None:
            if x is None:
                raise ConfigurationError("need x or z for a latent attack")
            with torch.no_grad():
                z, _ = flow.forward_transform(x)
        z = z.detach()
        base_levels = z.per_level
        n = z.batch_size
        if attack_levels is None:
            attack_levels = list(range(len(base_levels)))
        for i in attack_levels:
            if not 0 <= i < len(base_levels):
                raise ConfigurationError(
                    f"attack level {i} out of range for {len(base_levels)} levels"
                )
        ref = base_levels[0]
    else:
        if x is None:
            if z is None or flow is None:
                raise ConfigurationError("need x (or z with a flow)")
            with torch.no_grad():
                x = flow.inverse_transform(z)
        x = x.detach()
        n = x.shape[0]
        ref = x

    if use_image and x is None:
        with torch.no_grad():
            x = flow.inverse_transform(z)
        x = x.detach()

    delta = torch.zeros(
        x.shape if x is not None else (n, *flow.input_shape),
        dtype=ref.dtype,
    )
    if use_image and threat.random_start:
        gen = torch_rng(seed, "attack-random-start")
        delta = (
            (torch.rand(delta.shape, generator=gen, dtype=delta.dtype) * 2 - 1)
            * threat.image_eps
        )
        delta = _project_delta(delta, threat)
    lams = (
        [torch.zeros_like(zl) for zl in base_levels] if use_latent else None
    )

    def evaluate(delta_t, lam_ts, need_grad):
        if use_latent:
            code = LatentCode([
                zl + lt for zl, lt in zip(base_levels, lam_ts)
            ])
            base = flow.inverse_transform(code)
        else:
            base = x
        x_in = base + delta_t if use_image else base
        if clip_in_loss:
            x_in = x_in.clamp(lo, hi)
        return ce_loss(model, x_in, target)

    best_loss = torch.full((n,), -float("inf"), dtype=ref.dtype)
    best_delta, best_lams = delta.clone(), (
        [l.clone() for l in lams] if use_latent else None
    )

    def consider(loss, delta_t, lam_ts):
        nonlocal best_loss, best_delta, best_lams
        mask = loss > best_loss
        best_loss = torch.where(mask, loss, best_loss)
        view = mask.reshape(-1, *([1] * (delta_t.ndim - 1)))
        best_delta = torch.where(view, delta_t, best_delta)
        if use_latent:
            best_lams = [
                torch.where(mask.reshape(-1, *([1] * (lt.ndim - 1))), lt, bl)
                for lt, bl in zip(lam_ts, best_lams)
            ]

    trace = []
    iters = threat.iterations if (use_image or use_latent) else 0
    for k in range(iters):
        delta_leaf = delta.detach().requires_grad_(use_image)
        lam_leaves = (
            [
                l.detach().requires_grad_(i in attack_levels)
                for i, l in enumerate(lams)
            ]
            if use_latent else None
        )
        loss = evaluate(delta_leaf, lam_leaves, need_grad=True)
        trace.append(loss.detach())
        consider(loss.detach(), delta, lams if use_latent else None)
        grad_targets = []
        if use_image:
            grad_targets.append(delta_leaf)
        if use_latent:
            grad_targets += [lam_leaves[i] for i in attack_levels]
        grads = torch.autograd.grad(loss.sum(), grad_targets, allow_unused=True)
        for g in grads:
            if g is not None and not torch.isfinite(g).all():
                raise NumericsError(
                    f"non-finite attack gradient at iteration {k}", iteration=k
                )
        gi = 0
        if use_image:
            g = grads[gi]
            gi += 1
            if g is None:
                g = torch.zeros_like(delta)
            delta = _project_delta(_delta_step(delta, g, threat), threat)
        if use_latent:
            eta, step = threat.latent_eta, threat.latent_step
            for i in attack_levels:
                g = grads[gi]
                gi += 1
                if g is None:
                    g = torch.zeros_like(lams[i])
                lams[i] = (lams[i] + step * torch.sign(g)).clamp(-eta, eta)

    with torch.no_grad():
        final_loss = evaluate(delta, lams, need_grad=False)
    trace.append(final_loss)
    consider(final_loss, delta, lams if use_latent else None)
    if not trace:
        with torch.no_grad():
            trace = [evaluate(delta, lams, need_grad=False)]
    # Pad degenerate zero-iteration traces to length iterations + 1.
    while len(trace) < threat.iterations + 1:
        trace.append(trace[-1])

    if best_iterate:
        delta, lams = best_delta, best_lams

    with torch.no_grad():
        if use_latent:
            code = LatentCode([
                zl + lt for zl, lt in zip(base_levels, lams)
            ])
            base = flow.inverse_transform(code)
        else:
            base = x
        x_adv = base + delta if use_image else base
        if final_clip:
            x_adv = x_adv.clamp(lo, hi)
        preds = model(x_adv).argmax(dim=1)
        success = preds != target.dominant_label()

    lam_flat = (
        torch.cat([l.reshape(n, -1) for l in lams], dim=1) if use_latent else None
    )
    return AdversarialExample(
        x_adv=x_adv, delta=delta, lam=lam_flat,
        loss_trace=torch.stack(trace), success=success,
    )


def pgd_attack(model, x, target, threat: ThreatModel, *, seed: int = 0,
               best_iterate: bool = False) -> AdversarialExample:
    """K-step projected sign-gradient ascent in image space (latent off)."""
    threat = replace(threat, latent_eta=0.0, latent_step=0.0)
    return joint_attack(model, None, x, target, threat, seed=seed,
                        best_iterate=best_iterate)


def fgsm_attack(model, x, target, threat: ThreatModel) -> AdversarialExample:
    """Single full-budget sign step: PGD with K=1 and step = eps."""
    threat = replace(threat, latent_eta=0.0, latent_step=0.0, iterations=1,
                     image_step=threat.image_eps, random_start=False)
    return joint_attack(model, None, x, target, threat)


def l2_pgd_attack(model, x, target, threat: ThreatModel, *, seed: int = 0,
                  best_iterate: bool = False) -> AdversarialExample:
    threat = replace(threat, norm="2", latent_eta=0.0, latent_step=0.0)
    return joint_attack(model, None, x, target, threat, seed=seed,
                        best_iterate=best_iterate)


def om_pgd_attack(model, flow, x, target, threat: ThreatModel, *,
                  z: LatentCode | None = None, best_iterate: bool = False,
                  final_clip: bool = True) -> AdversarialExample:
    """On-manifold attack: perturb the latent code only (image budget off)."""
    threat = replace(threat, image_eps=0.0, image_step=0.0)
    return joint_attack(model, flow, x, target, threat, z=z,
                        best_iterate=best_iterate, final_clip=final_clip)


def jsa_attack(model, flow, x, target, threat: ThreatModel, *,
               z: LatentCode | None = None, seed: int = 0,
               best_iterate: bool = False, clip_in_loss: bool = True,
               final_clip: bool = True) -> AdversarialExample:
    """Joint-space attack: simultaneous sign updates of delta and lambda."""
    return joint_attack(model, flow, x, target, threat, z=z, seed=seed,
                        best_iterate=best_iterate, clip_in_loss=clip_in_loss,
                        final_clip=final_clip)


def per_level_jsa(model, flow, x, target, level_index: int,
                  threat: ThreatModel, *, z: LatentCode | None = None,
                  seed: int = 0) -> AdversarialExample:
    """Joint attack whose latent perturbation touches only one flow level
    (1-based index); other levels stay bit-identical."""
    n_levels = len(flow.latent_shapes)
    if not 1 <= level_index <= n_levels:
        raise ConfigurationError(
            f"level_index {level_index} out of range 1..{n_levels}"
        )
    return joint_attack(model, flow, x, target, threat, z=z,
                        attack_levels=[level_index - 1], seed=seed)
