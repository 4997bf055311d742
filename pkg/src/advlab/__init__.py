"""Joint image/latent space adversarial attacks and interpolated adversarial training.

The package couples an exact-likelihood invertible generator with a
differentiable classifier and provides:

* image-space attacks (FGSM, PGD, L2-PGD),
* latent-space attacks through the generator (on-manifold PGD),
* the joint attack that perturbs both spaces at once,
* robust mixup (attack the interpolated sample under the mixed loss),
* adversarial training loops including the interpolated joint-space variant,
* a robustness/corruption evaluation harness with figure rendering.
"""

from advlab.errors import (
    AdvlabError,
    CheckpointError,
    ConfigurationError,
    DataFormatError,
    NumericsError,
)

__version__ = "0.1.0"

__all__ = [
    "AdvlabError",
    "CheckpointError",
    "ConfigurationError",
    "DataFormatError",
    "NumericsError",
    "__version__",
]
