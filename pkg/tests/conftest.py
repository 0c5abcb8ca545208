"""Shared fixtures: tiny synthetic volumes and a micro-trained model stack.

Unit tests run on 16^3 random smooth volumes (fast); the acceptance module
builds its own full phantom stack.
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from brainprog.autoencoder import AeDescriptor, AeTrainConfig, train_autoencoder
from brainprog.covariates import REGIONS, Covariates
from brainprog.denoiser import DenoiserDescriptor, LdmTrainConfig, init_denoiser, train_ldm
from brainprog.diffusion import DiffusionConfig, build_schedule
from brainprog.grids import VolumeGrid


def _smooth_volume(rng, shape=(16, 16, 16)):
    data = gaussian_filter(rng.standard_normal(shape), sigma=2.0)
    data = (data - data.min()) / (data.max() - data.min())
    return VolumeGrid(data=data.astype(np.float32))


@pytest.fixture(scope="session")
def tiny_volumes():
    rng = np.random.default_rng(100)
    return [_smooth_volume(rng) for _ in range(8)]


@pytest.fixture(scope="session")
def tiny_ae(tiny_volumes):
    desc = AeDescriptor(volume_shape=(16, 16, 16), factor=4, latent_channels=2, base_channels=8)
    return train_autoencoder(
        tiny_volumes,
        AeTrainConfig(iterations=150, batch_size=4, lr=2e-3, val_every=50),
        seed=7,
        descriptor=desc,
    )


@pytest.fixture(scope="session")
def tiny_sched():
    return build_schedule(DiffusionConfig(T=50, beta_start=0.01, beta_end=0.2))


def _random_covariates(rng):
    return Covariates(
        age_years=float(rng.uniform(60, 80)),
        sex=str(rng.choice(["female", "male"])),
        cognitive_status=str(rng.choice(["CN", "MCI", "AD"])),
        region_fractions={r: float(rng.uniform(0.0, 0.05)) for r in REGIONS},
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_ae, tiny_volumes):
    from brainprog.autoencoder import encode

    rng = np.random.default_rng(5)
    return [(encode(tiny_ae, v), _random_covariates(rng)) for v in tiny_volumes]


@pytest.fixture(scope="session")
def tiny_denoiser(tiny_dataset, tiny_sched):
    desc = DenoiserDescriptor(
        latent_shape=tiny_dataset[0][0].shape, base_channels=16, ctx_dim=16, time_dim=32
    )
    params = init_denoiser(desc, seed=11, T=tiny_sched.T)
    return train_ldm(
        params,
        tiny_dataset,
        tiny_sched,
        LdmTrainConfig(iterations=120, batch_size=8, lr=1e-3, log_every=40),
        seed=13,
    )


@pytest.fixture(scope="session")
def tiny_bundle(tiny_ae, tiny_denoiser, tiny_sched):
    """Real (untrained-quality) model stack with an intercept-only LM."""
    from brainprog.control import init_controlnet
    from brainprog.engine import ModelBundle
    from brainprog.progression import LM_FEATURES, LmModel

    coeffs = {r: np.zeros(len(LM_FEATURES) + 1) for r in REGIONS}
    for r in REGIONS:
        coeffs[r][0] = 0.02
    lm = LmModel(huber_delta=1.35, coefficients=coeffs)
    bundle = ModelBundle(
        autoencoder=tiny_ae,
        denoiser=tiny_denoiser,
        control=init_controlnet(tiny_denoiser),
        lm=lm,
        dcm=None,
        schedule=tiny_sched,
    )
    bundle.validate()
    return bundle
