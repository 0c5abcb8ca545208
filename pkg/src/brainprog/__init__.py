"""Latent-diffusion progression modeling for 3D brain volumes.

Library layout mirrors the pipeline: diffusion math (`diffusion`), the
volume autoencoder (`autoencoder`), the covariate-conditioned denoiser
(`denoiser`), the anatomy control module (`control`), auxiliary
progression models (`progression`), the stabilized inference engine
(`engine`), phantom-cohort generation (`phantoms`), metrics and analytics
(`metrics`, `analytics`, `sweeps`), and the CLI (`cli`).
"""

from .covariates import Covariates, embed_covariates
from .diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    SamplerConfig,
    build_schedule,
    ddim_sample,
    forward_marginal,
    forward_step,
    noise_loss,
    predict_x0,
)
from .grids import LatentGrid, VolumeGrid

__version__ = "0.1.0"

__all__ = [
    "Covariates",
    "DiffusionConfig",
    "LatentGrid",
    "NoiseSchedule",
    "SamplerConfig",
    "VolumeGrid",
    "build_schedule",
    "ddim_sample",
    "embed_covariates",
    "forward_marginal",
    "forward_step",
    "noise_loss",
    "predict_x0",
    "__version__",
]
