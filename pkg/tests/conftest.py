import numpy as np
import pytest

from advlab.classifier import ClassifierConfig, ClassifierModel
from advlab.data import SyntheticManifoldSpec, synth_manifold_dataset
from advlab.flow.affine import AffineSigmoidGenerator
from advlab.flow.model import FlowConfig, FlowModel, randomize_parameters


@pytest.fixture(scope="session")
def small_flow():
    """Randomized two-level flow on 3x4x4 images, double precision."""
    config = FlowConfig(
        levels=2, steps_per_level=2, hidden_width=16, input_shape=(3, 4, 4),
        dequantization_noise=False,
    )
    flow = FlowModel(config, identity_init=True).double()
    return randomize_parameters(flow, seed=7, scale=0.05)


@pytest.fixture(scope="session")
def affine_generator():
    return AffineSigmoidGenerator((2, 2, 2), seed=3)


@pytest.fixture(scope="session")
def manifold_data():
    """Small exact-manifold dataset plus its generator."""
    spec = SyntheticManifoldSpec(
        input_shape=(3, 4, 4), n_samples=300, seed=0, latent_margin=0.6,
        generator_scale=0.025,
    )
    return synth_manifold_dataset(spec)


@pytest.fixture(scope="session")
def linear_classifier():
    return ClassifierModel(
        ClassifierConfig(arch="linear", input_shape=(3, 4, 4), num_classes=2),
        init_seed=5,
    ).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
