"""Mixup sampling and the two attack-interpolation orderings."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.attacks import ThreatModel
from advlab.classifier import TargetSpec, ce_loss
from advlab.errors import ConfigurationError
from advlab.mixup import (
    MixupBatch,
    iat_baseline_mix,
    input_mixup,
    robust_mixup_attack,
    sample_alpha,
)


def test_sample_alpha_range_and_determinism():
    a = [sample_alpha(0.2, np.random.default_rng(7)) for _ in range(3)]
    b = [sample_alpha(0.2, np.random.default_rng(7)) for _ in range(3)]
    assert a[0] == b[0]
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = sample_alpha(0.2, rng)
        assert 0.0 < v < 1.0


def test_sample_alpha_rejects_bad_tau():
    with pytest.raises(ConfigurationError):
        sample_alpha(0.0, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        sample_alpha(-1.0, np.random.default_rng(0))


def test_small_tau_concentrates_at_endpoints():
    rng = np.random.default_rng(3)
    draws = np.array([sample_alpha(0.1, rng) for _ in range(500)])
    near_edges = ((draws < 0.1) | (draws > 0.9)).mean()
    assert near_edges > 0.7


def test_input_mixup_is_convex_combination():
    x_i = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
    x_j = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    mixed = input_mixup(x_i, x_j, 0.25)
    assert torch.allclose(mixed, torch.full_like(mixed, 0.75))
    with pytest.raises(ConfigurationError):
        input_mixup(x_i, torch.ones(2, 1, 2, 3, dtype=torch.float64), 0.5)


def test_mixup_batch_validation():
    x = torch.zeros(2, 1, 2, 2)
    y = torch.tensor([0, 1])
    with pytest.raises(ConfigurationError):
        MixupBatch(x_i=x, x_j=x, y_i=y, y_j=y, alpha=1.0)
    batch = MixupBatch(x_i=x, x_j=x, y_i=y, y_j=y, alpha=0.5)
    assert batch.target.is_soft


def _pairs(manifold_data, n=32):
    ds, gen = manifold_data
    x = ds.images_t()
    y = ds.labels_t()
    return (
        MixupBatch(x_i=x[:n], x_j=x[n : 2 * n], y_i=y[:n], y_j=y[n : 2 * n],
                   alpha=0.3),
        gen,
    )


def test_robust_mixup_respects_budgets(linear_classifier, manifold_data):
    batch, gen = _pairs(manifold_data)
    threat = ThreatModel(image_eps=0.1, image_step=0.025, latent_eta=0.05,
                         latent_step=0.0125, iterations=5)
    adv = robust_mixup_attack(linear_classifier, gen, batch, threat)
    assert float(adv.delta.abs().max()) <= 0.1 + 1e-12
    assert float(adv.lam.abs().max()) <= 0.05 + 1e-12
    assert float(adv.x_adv.min()) >= 0.0 and float(adv.x_adv.max()) <= 1.0


def test_iat_baseline_feasible_and_distinct(linear_classifier, manifold_data):
    batch, gen = _pairs(manifold_data)
    threat = ThreatModel(image_eps=0.1, image_step=0.025, iterations=5)
    mixed = iat_baseline_mix(linear_classifier, gen, batch, threat)
    # Convexity: the interpolated perturbation stays within the image budget
    # around the interpolated clean point.
    assert float((mixed - batch.x_mix).abs().max()) <= 0.1 + 1e-12
    with pytest.raises(ConfigurationError):
        iat_baseline_mix(linear_classifier, gen, batch, threat, attack="cw")


def test_robust_mixup_attacks_the_mixed_objective(linear_classifier,
                                                  manifold_data):
    # Attack-then-nothing vs attack on the mix: the robust-mixup output
    # achieves at least the pre-attack mixed loss.
    batch, gen = _pairs(manifold_data)
    threat = ThreatModel(image_eps=0.1, image_step=0.025, iterations=5)
    adv = robust_mixup_attack(linear_classifier, gen, batch, threat)
    with torch.no_grad():
        before = float(ce_loss(linear_classifier, batch.x_mix, batch.target).mean())
        after = float(ce_loss(linear_classifier, adv.x_adv, batch.target).mean())
    assert after >= before - 1e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=0.05, max_value=5.0),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_property_alpha_always_in_open_interval(tau, seed):
    v = sample_alpha(tau, np.random.default_rng(seed))
    assert 0.0 < v < 1.0
