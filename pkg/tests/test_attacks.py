"""Attack engine: budgets, projections, reductions, and oracles."""

import itertools

import pytest
import torch

from advlab.attacks import (
    AdversarialExample,
    ThreatModel,
    fgsm_attack,
    jsa_attack,
    joint_attack,
    l2_pgd_attack,
    om_pgd_attack,
    per_level_jsa,
    pgd_attack,
)
from advlab.classifier import ClassifierConfig, ClassifierModel, TargetSpec, ce_loss
from advlab.errors import ConfigurationError


def _rand(shape, seed=0):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _threat(**kw):
    base = dict(image_eps=0.1, image_step=0.025, iterations=5)
    base.update(kw)
    return ThreatModel(**base)


# -- threat model validation ------------------------------------------------


def test_threat_validation():
    with pytest.raises(ConfigurationError):
        ThreatModel(norm="1")
    with pytest.raises(ConfigurationError):
        ThreatModel(image_eps=-0.1)
    with pytest.raises(ConfigurationError):
        ThreatModel(image_eps=0.1, image_step=0.0)
    with pytest.raises(ConfigurationError):
        ThreatModel(image_eps=0.1, image_step=0.2)
    with pytest.raises(ConfigurationError):
        ThreatModel(latent_eta=0.1, latent_step=0.2)


def test_threat_dict_roundtrip():
    t = ThreatModel(norm="2", image_eps=0.5, image_step=0.1, latent_eta=0.05,
                    latent_step=0.01, iterations=7, random_start=True)
    assert ThreatModel.from_dict(t.to_dict()) == t


# -- basic attack behavior --------------------------------------------------


def test_pgd_increases_loss(linear_classifier, manifold_data):
    ds, _ = manifold_data
    x = ds.images_t()[:32]
    y = ds.labels_t()[:32]
    target = TargetSpec.hard(y)
    adv = pgd_attack(linear_classifier, x, target, _threat())
    assert adv.loss_trace.shape == (6, 32)
    # Final loss at least matches the starting loss for every sample.
    assert bool((adv.loss_trace.max(dim=0).values >= adv.loss_trace[0]).all())
    assert float(adv.loss_trace[-1].mean()) > float(adv.loss_trace[0].mean())


def test_pgd_budget_and_range(linear_classifier, manifold_data):
    ds, _ = manifold_data
    x = ds.images_t()[:64]
    adv = pgd_attack(linear_classifier, x, TargetSpec.hard(ds.labels_t()[:64]),
                     _threat(random_start=True))
    assert float(adv.delta.abs().max()) <= 0.1 + 1e-12
    assert float(adv.x_adv.min()) >= 0.0
    assert float(adv.x_adv.max()) <= 1.0


def test_pgd_matches_sign_corner_oracle():
    # On a linear model the L-inf maximizer of the loss over the eps box
    # sits at a sign corner; PGD must find it.
    model = ClassifierModel(
        ClassifierConfig(arch="linear", input_shape=(3, 1, 1), num_classes=2),
        init_seed=3,
    ).double()
    threat = ThreatModel(image_eps=0.2, image_step=0.05, iterations=5)
    gen = torch.Generator()
    gen.manual_seed(0)
    for trial in range(20):
        x = torch.rand(1, 3, 1, 1, generator=gen, dtype=torch.float64) * 0.5 + 0.25
        y = torch.randint(0, 2, (1,), generator=gen)
        target = TargetSpec.hard(y)
        adv = pgd_attack(model, x, target, threat)
        with torch.no_grad():
            got = float(ce_loss(model, adv.x_adv, target))
            best = -float("inf")
            for signs in itertools.product([-1.0, 1.0], repeat=3):
                corner = x + 0.2 * torch.tensor(signs, dtype=torch.float64).reshape(
                    1, 3, 1, 1
                )
                corner = corner.clamp(0.0, 1.0)
                best = max(best, float(ce_loss(model, corner, target)))
        assert abs(got - best) < 1e-6


def test_fgsm_is_single_full_step(linear_classifier, manifold_data):
    ds, _ = manifold_data
    x = ds.images_t()[:8]
    target = TargetSpec.hard(ds.labels_t()[:8])
    adv = fgsm_attack(linear_classifier, x, target, _threat())
    assert adv.loss_trace.shape[0] == 2
    # Every delta coordinate sits at +/-eps (sign step of the full budget)
    # unless its gradient was exactly zero.
    nonzero = adv.delta[adv.delta != 0]
    assert torch.allclose(nonzero.abs(), torch.full_like(nonzero, 0.1))


def test_l2_projection(linear_classifier, manifold_data):
    ds, _ = manifold_data
    x = ds.images_t()[:16]
    threat = ThreatModel(norm="2", image_eps=0.5, image_step=0.2, iterations=5)
    adv = l2_pgd_attack(linear_classifier, x, TargetSpec.hard(ds.labels_t()[:16]),
                        threat)
    norms = adv.delta.reshape(16, -1).norm(dim=1)
    assert float(norms.max()) <= 0.5 + 1e-9


def test_om_pgd_respects_latent_budget(linear_classifier, manifold_data):
    ds, gen = manifold_data
    x = ds.images_t()[:16]
    threat = ThreatModel(latent_eta=0.05, latent_step=0.0125, iterations=5)
    adv = om_pgd_attack(linear_classifier, gen, x,
                        TargetSpec.hard(ds.labels_t()[:16]), threat)
    assert adv.lam is not None
    assert float(adv.lam.abs().max()) <= 0.05 + 1e-12
    assert torch.equal(adv.delta, torch.zeros_like(adv.delta))


def test_om_pgd_stays_on_manifold(linear_classifier, manifold_data):
    # Without image-space perturbation and without the final clip, the
    # adversarial image re-encodes to within eta of the original latent.
    ds, gen = manifold_data
    x = ds.images_t()[:32]
    z = ds.latents_t()[:32]
    threat = ThreatModel(latent_eta=0.05, latent_step=0.0125, iterations=5)
    adv = om_pgd_attack(linear_classifier, gen, x,
                        TargetSpec.hard(ds.labels_t()[:32]), threat,
                        final_clip=False)
    z_adv = gen.forward_transform(adv.x_adv)[0].flatten().detach()
    assert float((z_adv - z).abs().max()) <= 0.05 + 1e-6


def test_jsa_budget_compliance(linear_classifier, manifold_data):
    ds, gen = manifold_data
    x = ds.images_t()[:32]
    threat = _threat(latent_eta=0.05, latent_step=0.0125)
    adv = jsa_attack(linear_classifier, gen, x,
                     TargetSpec.hard(ds.labels_t()[:32]), threat)
    assert float(adv.delta.abs().max()) <= 0.1 + 1e-12
    assert float(adv.lam.abs().max()) <= 0.05 + 1e-12
    assert float(adv.x_adv.min()) >= 0.0 and float(adv.x_adv.max()) <= 1.0


def test_jsa_requires_flow_for_latent_budget(linear_classifier):
    x = torch.sigmoid(_rand((2, 3, 4, 4)))
    threat = _threat(latent_eta=0.05, latent_step=0.0125)
    with pytest.raises(ConfigurationError):
        jsa_attack(linear_classifier, None, x,
                   TargetSpec.hard(torch.tensor([0, 1])), threat)


# -- degenerate reductions --------------------------------------------------


def test_jsa_zero_eta_equals_pgd_bitwise(linear_classifier, manifold_data):
    ds, gen = manifold_data
    x = ds.images_t()[:16]
    target = TargetSpec.hard(ds.labels_t()[:16])
    threat = _threat(random_start=True)
    a = pgd_attack(linear_classifier, x, target, threat, seed=42)
    b = jsa_attack(linear_classifier, gen, x, target, threat, seed=42)
    assert torch.equal(a.x_adv, b.x_adv)
    assert torch.equal(a.delta, b.delta)
    assert torch.equal(a.loss_trace, b.loss_trace)
    assert b.lam is None


def test_jsa_zero_eps_equals_om_pgd(linear_classifier, manifold_data):
    ds, gen = manifold_data
    x = ds.images_t()[:16]
    target = TargetSpec.hard(ds.labels_t()[:16])
    threat = ThreatModel(latent_eta=0.05, latent_step=0.0125, iterations=5)
    a = om_pgd_attack(linear_classifier, gen, x, target, threat)
    b = jsa_attack(linear_classifier, gen, x, target, threat, seed=0)
    assert torch.equal(a.x_adv, b.x_adv)
    assert torch.equal(a.lam, b.lam)
    assert torch.equal(a.loss_trace, b.loss_trace)


def test_zero_budget_returns_input(linear_classifier, manifold_data):
    ds, gen = manifold_data
    x = ds.images_t()[:8]
    threat = ThreatModel(iterations=5)
    adv = jsa_attack(linear_classifier, gen, x,
                     TargetSpec.hard(ds.labels_t()[:8]), threat)
    assert torch.equal(adv.x_adv, x)
    assert adv.loss_trace.shape == (6, 8)
    # All trace rows identical: nothing moved.
    assert torch.equal(adv.loss_trace[0], adv.loss_trace[-1])


# -- engine options ---------------------------------------------------------


def test_random_start_is_seeded(linear_classifier, manifold_data):
    ds, _ = manifold_data
    x = ds.images_t()[:8]
    target = TargetSpec.hard(ds.labels_t()[:8])
    threat = _threat(random_start=True)
    a = pgd_attack(linear_classifier, x, target, threat, seed=1)
    b = pgd_attack(linear_classifier, x, target, threat, seed=1)
    c = pgd_attack(linear_classifier, x, target, threat, seed=2)
    assert torch.equal(a.x_adv, b.x_adv)
    assert not torch.equal(a.x_adv, c.x_adv)


def test_best_iterate_never_loses(linear_classifier, manifold_data):
    ds, _ = manifold_data
    x = ds.images_t()[:32]
    target = TargetSpec.hard(ds.labels_t()[:32])
    threat = _threat(iterations=8)
    best = pgd_attack(linear_classifier, x, target, threat, best_iterate=True)
    with torch.no_grad():
        loss_best = ce_loss(linear_classifier, best.x_adv, target)
    # Best-iterate final loss matches the max over the recorded trace.
    assert bool((loss_best >= best.loss_trace.max(dim=0).values - 1e-9).all())


def test_per_level_jsa_touches_one_level(linear_classifier, manifold_data):
    ds, gen_flow = manifold_data
    x = ds.images_t()[:8]
    target = TargetSpec.hard(ds.labels_t()[:8])
    threat = ThreatModel(latent_eta=0.05, latent_step=0.0125, iterations=3)
    n_levels = len(gen_flow.latent_shapes)
    assert n_levels == 2
    with torch.no_grad():
        z, _ = gen_flow.forward_transform(x)
    adv = per_level_jsa(linear_classifier, gen_flow, x, target, 1, threat)
    sizes = [int(torch.tensor(s).prod()) for s in gen_flow.latent_shapes]
    lam1 = adv.lam[:, : sizes[0]]
    lam2 = adv.lam[:, sizes[0] :]
    assert float(lam1.abs().max()) > 0
    assert torch.equal(lam2, torch.zeros_like(lam2))
    with pytest.raises(ConfigurationError):
        per_level_jsa(linear_classifier, gen_flow, x, target, 3, threat)


def test_attack_from_latent_code(linear_classifier, manifold_data):
    ds, gen_flow = manifold_data
    x = ds.images_t()[:8]
    target = TargetSpec.hard(ds.labels_t()[:8])
    threat = ThreatModel(latent_eta=0.05, latent_step=0.0125, iterations=3)
    with torch.no_grad():
        z, _ = gen_flow.forward_transform(x)
    a = om_pgd_attack(linear_classifier, gen_flow, x, target, threat)
    b = om_pgd_attack(linear_classifier, gen_flow, None, target, threat, z=z)
    assert torch.equal(a.x_adv, b.x_adv)
