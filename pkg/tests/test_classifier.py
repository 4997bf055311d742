"""Classifier architectures, mixed cross-entropy, and input gradients."""

import pytest
import torch
import torch.nn.functional as F

from advlab.classifier import (
    ClassifierConfig,
    ClassifierModel,
    TargetSpec,
    ce_loss,
    ce_loss_from_logits,
    input_gradient,
    predict_labels,
    predict_logits,
)
from advlab.errors import ConfigurationError


def _rand(shape, seed=0):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ClassifierConfig(arch="transformer")
    with pytest.raises(ConfigurationError):
        ClassifierConfig(num_classes=1)


@pytest.mark.parametrize("arch", ["cnn", "mlp", "linear"])
def test_forward_shapes(arch):
    model = ClassifierModel(
        ClassifierConfig(arch=arch, input_shape=(3, 4, 4), num_classes=4,
                         width=8)
    ).double()
    x = torch.sigmoid(_rand((5, 3, 4, 4)))
    logits = predict_logits(model, x)
    assert logits.shape == (5, 4)
    assert predict_labels(model, x).shape == (5,)


def test_init_is_seeded():
    cfg = ClassifierConfig(arch="mlp", input_shape=(3, 4, 4), num_classes=2,
                           width=8)
    a = ClassifierModel(cfg, init_seed=9)
    b = ClassifierModel(cfg, init_seed=9)
    c = ClassifierModel(cfg, init_seed=10)
    pa = torch.cat([p.detach().reshape(-1) for p in a.parameters()])
    pb = torch.cat([p.detach().reshape(-1) for p in b.parameters()])
    pc = torch.cat([p.detach().reshape(-1) for p in c.parameters()])
    assert torch.equal(pa, pb)
    assert not torch.equal(pa, pc)


def test_shape_mismatch_raises(linear_classifier):
    with pytest.raises(ConfigurationError):
        linear_classifier(_rand((2, 3, 8, 8)))


def test_hard_target_matches_cross_entropy(linear_classifier):
    x = torch.sigmoid(_rand((6, 3, 4, 4)))
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    loss = ce_loss(linear_classifier, x, TargetSpec.hard(y))
    expected = F.cross_entropy(linear_classifier(x), y, reduction="none")
    assert torch.allclose(loss, expected)


def test_soft_target_is_convex_combination():
    logits = _rand((4, 3), seed=2)
    y_i = torch.tensor([0, 1, 2, 0])
    y_j = torch.tensor([2, 0, 1, 1])
    alpha = 0.3
    mixed = ce_loss_from_logits(logits, TargetSpec.soft(y_i, y_j, alpha))
    li = F.cross_entropy(logits, y_i, reduction="none")
    lj = F.cross_entropy(logits, y_j, reduction="none")
    assert torch.allclose(mixed, alpha * li + (1 - alpha) * lj)


def test_soft_target_endpoints_reduce_to_hard():
    logits = _rand((4, 3), seed=2)
    y_i = torch.tensor([0, 1, 2, 0])
    y_j = torch.tensor([2, 0, 1, 1])
    at_one = ce_loss_from_logits(logits, TargetSpec(y_i=y_i, y_j=y_j, alpha=1.0))
    at_zero = ce_loss_from_logits(logits, TargetSpec(y_i=y_i, y_j=y_j, alpha=0.0))
    assert torch.equal(at_one, F.cross_entropy(logits, y_i, reduction="none"))
    assert torch.equal(at_zero, F.cross_entropy(logits, y_j, reduction="none"))


def test_soft_constructor_rejects_endpoint_alpha():
    y = torch.tensor([0, 1])
    with pytest.raises(ConfigurationError):
        TargetSpec.soft(y, y, 0.0)
    with pytest.raises(ConfigurationError):
        TargetSpec.soft(y, y, 1.0)


def test_dominant_label():
    y_i, y_j = torch.tensor([0, 0]), torch.tensor([1, 1])
    assert torch.equal(TargetSpec.soft(y_i, y_j, 0.7).dominant_label(), y_i)
    assert torch.equal(TargetSpec.soft(y_i, y_j, 0.3).dominant_label(), y_j)
    assert torch.equal(TargetSpec.hard(y_i).dominant_label(), y_i)


def test_label_out_of_range_raises(linear_classifier):
    x = torch.sigmoid(_rand((2, 3, 4, 4)))
    with pytest.raises(ConfigurationError):
        ce_loss(linear_classifier, x, TargetSpec.hard(torch.tensor([0, 5])))


def test_input_gradient_matches_finite_differences(linear_classifier):
    x = torch.sigmoid(_rand((2, 3, 4, 4), seed=4))
    y = torch.tensor([0, 1])
    target = TargetSpec.hard(y)
    grad = input_gradient(linear_classifier, x, target)
    eps = 1e-6
    for index in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 1, 2, 2)]:
        xp, xm = x.clone(), x.clone()
        xp[index] += eps
        xm[index] -= eps
        with torch.no_grad():
            lp = float(ce_loss(linear_classifier, xp, target).sum())
            lm = float(ce_loss(linear_classifier, xm, target).sum())
        fd = (lp - lm) / (2 * eps)
        assert abs(float(grad[index]) - fd) < 1e-6 * max(1.0, abs(fd))


def test_models_have_no_stochastic_layers():
    for arch in ("cnn", "mlp", "linear"):
        model = ClassifierModel(
            ClassifierConfig(arch=arch, input_shape=(3, 4, 4), num_classes=2,
                             width=8)
        ).double()
        x = torch.sigmoid(_rand((3, 3, 4, 4)))
        assert torch.equal(model(x), model(x))
