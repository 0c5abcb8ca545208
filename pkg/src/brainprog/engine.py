"""Inference engine: source scan + covariates -> predicted follow-up.

The prediction pipeline per request: (i) the auxiliary model estimates the
region fractions at the target age, (ii) those join the target metadata as
the conditioning covariates, (iii) the source volume is encoded, (iv)
Gaussian noise seeds the reverse process, (v) the DDIM loop runs with the
anatomy-controlled denoiser, (vi) the mean latent is decoded.

Stabilized inference repeats this m times from seeds base_seed+i and
averages the latents (index-ascending left fold, so results are
bit-reproducible no matter how the m runs are scheduled), then derives
per-component sigma, the scalar uncertainty u, and the voxelwise
uncertainty map U.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from .autoencoder import AutoencoderParams
from .control import ControlContext, ControlParams, controlled_denoise
from .covariates import REGIONS, Covariates, embed_covariates
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample
from .grids import LatentGrid, VolumeGrid
from .progression import (
    DcmModel,
    LmModel,
    SubjectHistory,
    VisitRecord,
    personalize_and_predict_dcm,
    predict_lm,
)
from .volio import write_volume

AUX_MODES = ("auto", "lm", "dcm", "carry_forward")


@dataclass
class ModelBundle:
    """All trained components a prediction needs, cross-checked for compatibility."""

    autoencoder: AutoencoderParams
    denoiser: DenoiserParams
    control: ControlParams
    lm: LmModel | None = None
    dcm: DcmModel | None = None
    schedule: NoiseSchedule | None = None

    def validate(self) -> None:
        ae_latent = self.autoencoder.descriptor.latent_shape
        den_latent = tuple(self.denoiser.descriptor.latent_shape)
        if tuple(ae_latent) != den_latent:
            raise ValueError(
                f"autoencoder latent {ae_latent} incompatible with denoiser {den_latent}"
            )
        theta_hash = self.denoiser.content_hash()
        if self.control.theta_hash != theta_hash:
            raise ValueError(
                "control weights were trained against different base weights "
                f"(expected {self.control.theta_hash[:12]}..., have {theta_hash[:12]}...)"
            )
        if self.schedule is None:
            raise ValueError("model bundle needs a noise schedule")
        if self.schedule.T != self.denoiser.T:
            raise ValueError(
                f"schedule has T={self.schedule.T} but denoiser was trained with T={self.denoiser.T}"
            )


@dataclass(frozen=True)
class SubjectMetadata:
    """The target-time subject metadata (age B, sex, cognitive status)."""

    age_years: float
    sex: str
    cognitive_status: str


@dataclass(frozen=True)
class PredictionRequest:
    source_volume: VolumeGrid
    source_covariates: Covariates
    target_metadata: SubjectMetadata
    history: SubjectHistory | None = None
    las_m: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    base_seed: int = 0
    aux_mode: str = "auto"  # auto | lm | dcm | carry_forward

    def __post_init__(self):
        if self.target_metadata.age_years <= self.source_covariates.age_years:
            raise ValueError(
                f"target age {self.target_metadata.age_years} must exceed source age "
                f"{self.source_covariates.age_years}"
            )
        if self.las_m < 1:
            raise ValueError("las_m must be >= 1")
        if self.aux_mode not in AUX_MODES:
            raise ValueError(f"aux_mode must be one of {AUX_MODES}")


@dataclass
class PredictionResult:
    mean_latent: LatentGrid
    predicted_volume: VolumeGrid
    predicted_covariates: Covariates
    m_used: int
    seeds: list[int]
    sigma_latent: LatentGrid | None = None
    global_uncertainty: float | None = None
    uncertainty_map: VolumeGrid | None = None

    @property
    def has_uncertainty(self) -> bool:
        return self.sigma_latent is not None


def predict_target_fractions(models: ModelBundle, req: PredictionRequest) -> dict[str, float]:
    """Auxiliary-model dispatch: single visit -> LM, histories -> DCM."""
    mode = req.aux_mode
    if mode == "auto":
        n_visits = len(req.history.visits) if req.history is not None else 1
        mode = "dcm" if n_visits >= 2 else "lm"
    if mode == "carry_forward":
        return dict(req.source_covariates.region_fractions)
    if mode == "lm":
        if models.lm is None:
            raise ValueError("request routed to the linear model but none is loaded")
        return predict_lm(models.lm, req.source_covariates, req.target_metadata.age_years)
    if models.dcm is None:
        raise ValueError("request routed to the trajectory model but none is loaded")
    history = req.history
    if history is None:
        history = SubjectHistory(
            subject_id="_single",
            visits=(VisitRecord(req.source_covariates.age_years, req.source_covariates),),
        )
    return personalize_and_predict_dcm(models.dcm, history, req.target_metadata.age_years)


def target_covariates(models: ModelBundle, req: PredictionRequest) -> Covariates:
    v_hat = predict_target_fractions(models, req)
    meta = req.target_metadata
    return Covariates(
        age_years=meta.age_years,
        sex=meta.sex,
        cognitive_status=meta.cognitive_status,
        region_fractions=v_hat,
    )


def infer_single(models: ModelBundle, req: PredictionRequest, z_T: LatentGrid) -> LatentGrid:
    """One full inference pass from a given initial noise; deterministic."""
    models.validate()
    cov_b = target_covariates(models, req)
    cond = embed_covariates(cov_b)

    z_a = ae.encode(models.autoencoder, req.source_volume)
    ctx = ControlContext(source_latent=z_a, source_age_years=req.source_covariates.age_years)

    def denoiser_fn(z, t, c):
        return controlled_denoise(models.denoiser, models.control, z, t, c, ctx)

    if tuple(z_T.shape) != tuple(models.denoiser.descriptor.latent_shape):
        raise ValueError(
            f"z_T shape {z_T.shape} != model latent {models.denoiser.descriptor.latent_shape}"
        )
    z0_diff = ddim_sample(
        denoiser_fn,
        z_T.data.astype(np.float32),
        cond,
        models.schedule,
        req.sampler,
        seed=req.base_seed,
    )
    return LatentGrid(data=z0_diff / models.denoiser.latent_scale)


def draw_initial_noise(shape: tuple[int, ...], seed: int) -> LatentGrid:
    rng = np.random.default_rng(seed)
    return LatentGrid(data=rng.standard_normal(shape).astype(np.float32))


def estimate_sigma(latents: list[LatentGrid], mean: LatentGrid) -> LatentGrid:
    """Per-component sample standard deviation (m-1 denominator)."""
    if len(latents) < 2:
        raise ValueError(f"need >= 2 latents, got {len(latents)}")
    mu = mean.data.astype(np.float64)
    acc = np.zeros_like(mu)
    for z in latents:
        if z.shape != mean.shape:
            raise ValueError("latent shapes inconsistent")
        d = z.data.astype(np.float64) - mu
        acc += d * d
    return LatentGrid(data=np.sqrt(acc / (len(latents) - 1)))


def global_uncertainty(sigma: LatentGrid) -> float:
    """Mean of the per-component deviations; the scalar uncertainty u."""
    return float(np.mean(sigma.data))


def voxel_uncertainty_map(
    latents: list[LatentGrid], mean: LatentGrid, decoder
) -> VolumeGrid:
    """Voxelwise mean squared deviation of decoded samples from the decoded mean."""
    if len(latents) < 2:
        raise ValueError(f"need >= 2 latents, got {len(latents)}")
    dec_mean = decoder(mean).data.astype(np.float64)
    acc = np.zeros_like(dec_mean)
    for z in latents:
        d = decoder(z).data.astype(np.float64) - dec_mean
        acc += d * d
    return VolumeGrid(data=acc / (len(latents) - 1))


def las_predict(models: ModelBundle, req: PredictionRequest) -> PredictionResult:
    """Stabilized prediction: average m independent inference runs."""
    models.validate()
    shape = tuple(models.denoiser.descriptor.latent_shape)
    seeds = [req.base_seed + i for i in range(1, req.las_m + 1)]

    latents: list[LatentGrid] = []
    for s in seeds:
        z_T = draw_initial_noise(shape, s)
        latents.append(infer_single(models, req, z_T))

    acc = np.zeros(shape, dtype=np.float64)
    for z in latents:  # index-ascending left fold, declared reduction order
        acc = acc + z.data.astype(np.float64)
    mean = LatentGrid(data=acc / len(latents))

    def decoder(z: LatentGrid) -> VolumeGrid:
        return ae.decode(models.autoencoder, LatentGrid(data=z.data.astype(np.float32)))

    result = PredictionResult(
        mean_latent=mean,
        predicted_volume=decoder(mean),
        predicted_covariates=target_covariates(models, req),
        m_used=len(latents),
        seeds=seeds,
    )
    if len(latents) >= 2:
        sigma = estimate_sigma(latents, mean)
        result.sigma_latent = sigma
        result.global_uncertainty = global_uncertainty(sigma)
        result.uncertainty_map = voxel_uncertainty_map(latents, mean, decoder)
    return result


def rollout(
    models: ModelBundle, req_template: PredictionRequest, target_ages: list[float]
) -> list[PredictionResult]:
    """Independent stabilized predictions at increasing target ages.

    Every prediction conditions on the original source scan (never on a
    previous prediction), and all share the template's base_seed so the
    initial-noise draws are common across ages.
    """
    if any(b <= a for a, b in zip(target_ages, target_ages[1:])):
        raise ValueError(f"target ages must be strictly increasing: {target_ages}")
    if target_ages and target_ages[0] <= req_template.source_covariates.age_years:
        raise ValueError("all target ages must exceed the source age")
    results = []
    for age in target_ages:
        meta = SubjectMetadata(
            age_years=age,
            sex=req_template.target_metadata.sex,
            cognitive_status=req_template.target_metadata.cognitive_status,
        )
        req = PredictionRequest(
            source_volume=req_template.source_volume,
            source_covariates=req_template.source_covariates,
            target_metadata=meta,
            history=req_template.history,
            las_m=req_template.las_m,
            sampler=req_template.sampler,
            base_seed=req_template.base_seed,
            aux_mode=req_template.aux_mode,
        )
        results.append(las_predict(models, req))
    return results


def write_prediction_bundle(
    result: PredictionResult,
    req: PredictionRequest,
    models: ModelBundle,
    out_dir: str | Path,
    stem: str,
) -> Path:
    """Volume file + uncertainty map + structured-text sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_volume(result.predicted_volume, out_dir / f"{stem}.vol")
    if result.uncertainty_map is not None:
        write_volume(result.uncertainty_map, out_dir / f"{stem}_uncertainty.vol")

    lines = [
        "[request]",
        f"source_age = {req.source_covariates.age_years!r}",
        f"target_age = {req.target_metadata.age_years!r}",
        f"sex = {req.target_metadata.sex}",
        f"cognitive_status = {req.target_metadata.cognitive_status}",
        f"las_m = {req.las_m}",
        f"ddim_steps = {req.sampler.num_inference_steps}",
        f"eta = {req.sampler.eta!r}",
        f"base_seed = {req.base_seed}",
        f"aux_mode = {req.aux_mode}",
        "",
        "[result]",
        f"m_used = {result.m_used}",
        f"seeds = {','.join(str(s) for s in result.seeds)}",
        f"global_uncertainty = {result.global_uncertainty!r}",
        "",
        "[predicted_fractions]",
    ]
    lines += [
        f"{r} = {result.predicted_covariates.region_fractions[r]!r}" for r in REGIONS
    ]
    lines += [
        "",
        "[checkpoints]",
        f"autoencoder = {models.autoencoder.content_hash()}",
        f"denoiser = {models.denoiser.content_hash()}",
        f"control = {models.control.content_hash()}",
        "",
    ]
    sidecar = out_dir / f"{stem}.txt"
    sidecar.write_text("\n".join(lines))
    return sidecar
