from advlab.flow.model import (
    FlowConfig,
    FlowModel,
    LatentCode,
    LogDensity,
    fit_mle,
    latent_schedule,
    merge_levels,
    randomize_parameters,
    split_levels,
)
from advlab.flow.affine import AffineSigmoidGenerator

__all__ = [
    "AffineSigmoidGenerator",
    "FlowConfig",
    "FlowModel",
    "LatentCode",
    "LogDensity",
    "fit_mle",
    "latent_schedule",
    "merge_levels",
    "randomize_parameters",
    "split_levels",
]
