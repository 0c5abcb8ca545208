"""Evaluation harness: run predictions over a cohort and sweep settings.

A sweep runs the same evaluation cases under a grid of one setting
(stabilization count m, DDIM step count, auxiliary model on/off, or
deliberately wrong cognitive-status conditioning) and emits one metric
report per grid point plus wall-clock timings.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

from .analytics import MetricReport, MetricRow
from .covariates import Covariates
from .diffusion import SamplerConfig
from .engine import (
    ModelBundle,
    PredictionRequest,
    SubjectMetadata,
    las_predict,
)
from .errors import ConfigError
from .grids import VolumeGrid
from .metrics import SsimConfig, image_mse, image_ssim, region_maes_for_row
from .phantoms import PhantomSpec, measure_fractions
from .progression import SubjectHistory, VisitRecord
from .volio import Manifest, read_volume

SWEEP_KINDS = ("las_m", "ddim_steps", "aux_onoff", "wrong_conditioning")


@dataclass(frozen=True)
class EvalCase:
    """One prediction task with its ground truth."""

    subject_id: str
    source_volume: VolumeGrid
    source_covariates: Covariates
    history: SubjectHistory | None
    target_age: float
    sex: str
    cognitive_status: str
    true_volume: VolumeGrid
    true_fractions: dict[str, float]


@dataclass
class EvalContext:
    models: ModelBundle
    cases: list[EvalCase]
    phantom_spec: PhantomSpec
    las_m: int = 8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    base_seed: int = 0
    ssim: SsimConfig = field(default_factory=SsimConfig)


def build_eval_cases(
    manifest: Manifest, subject_ids: list[str], mode: str = "single"
) -> list[EvalCase]:
    """Prediction tasks for held-out subjects.

    single: predict every later visit from the first scan alone.
    sequence: condition on the last scan of the first half of visits and
    keep that half as the trajectory-model history.
    """
    if mode not in ("single", "sequence"):
        raise ValueError(f"mode must be single|sequence, got {mode!r}")
    cases = []
    for sid in subject_ids:
        visits = manifest.visits(sid)
        if mode == "single":
            n_hist = 1
        else:
            n_hist = max(1, math.ceil(len(visits) / 2))
            if n_hist >= len(visits):
                n_hist = len(visits) - 1
        hist_rows, target_rows = visits[:n_hist], visits[n_hist:]
        source_row = hist_rows[-1]
        source_vol = read_volume(manifest.resolve(source_row))
        history = SubjectHistory(
            subject_id=sid,
            visits=tuple(VisitRecord(r.visit_age, r.covariates()) for r in hist_rows),
        )
        for row in target_rows:
            cases.append(
                EvalCase(
                    subject_id=sid,
                    source_volume=source_vol,
                    source_covariates=source_row.covariates(),
                    history=history if mode == "sequence" else None,
                    target_age=row.visit_age,
                    sex=row.sex,
                    cognitive_status=row.diagnosis,
                    true_volume=read_volume(manifest.resolve(row)),
                    true_fractions=dict(row.fractions),
                )
            )
    return cases


def _flip_status(cov: Covariates, new_status: str) -> Covariates:
    return Covariates(cov.age_years, cov.sex, new_status, cov.region_fractions)


def evaluate_cases(
    ctx: EvalContext,
    las_m: int | None = None,
    sampler: SamplerConfig | None = None,
    aux_mode: str = "auto",
    wrong_conditioning: bool = False,
) -> MetricReport:
    """Predict every case and compare against the ground truth."""
    m = ctx.las_m if las_m is None else las_m
    scfg = ctx.sampler if sampler is None else sampler
    rows = []
    for i, case in enumerate(ctx.cases):
        source_cov = case.source_covariates
        status = case.cognitive_status
        history = case.history
        if wrong_conditioning and status == "AD":
            # condition the whole pipeline as if the subject were CN
            status = "CN"
            source_cov = _flip_status(source_cov, "CN")
            if history is not None:
                history = SubjectHistory(
                    subject_id=history.subject_id,
                    visits=tuple(
                        VisitRecord(v.age_years, _flip_status(v.covariates, "CN"))
                        for v in history.visits
                    ),
                )
        req = PredictionRequest(
            source_volume=case.source_volume,
            source_covariates=source_cov,
            target_metadata=SubjectMetadata(case.target_age, case.sex, status),
            history=history,
            las_m=m,
            sampler=scfg,
            base_seed=ctx.base_seed + 1000 * i,
            aux_mode=aux_mode,
        )
        result = las_predict(ctx.models, req)
        pred_fracs = measure_fractions(result.predicted_volume, ctx.phantom_spec)
        rows.append(
            MetricRow(
                subject_id=case.subject_id,
                source_age=case.source_covariates.age_years,
                target_age=case.target_age,
                mse=image_mse(result.predicted_volume, case.true_volume),
                ssim=image_ssim(result.predicted_volume, case.true_volume, ctx.ssim),
                mae=region_maes_for_row(pred_fracs, case.true_fractions),
                u=result.global_uncertainty,
                sex=case.sex,
                cognitive_status=case.cognitive_status,
            )
        )
    return MetricReport(rows=rows, ssim_config=ctx.ssim)


@dataclass(frozen=True)
class SweepPoint:
    value: object
    report: MetricReport
    wall_seconds: float


def sweep_harness(kind: str, grid: list, ctx: EvalContext) -> list[SweepPoint]:
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; use one of {SWEEP_KINDS}")
    if ctx.models is None:
        raise ValueError("sweep requires trained model checkpoints")
    points = []
    for value in grid:
        t0 = time.perf_counter()
        if kind == "las_m":
            report = evaluate_cases(ctx, las_m=int(value))
        elif kind == "ddim_steps":
            report = evaluate_cases(
                ctx, sampler=SamplerConfig(num_inference_steps=int(value), eta=ctx.sampler.eta)
            )
        elif kind == "aux_onoff":
            on = value in (True, "on", "aux")
            report = evaluate_cases(ctx, aux_mode="auto" if on else "carry_forward")
        else:  # wrong_conditioning
            wrong = value in (True, "wrong")
            report = evaluate_cases(ctx, wrong_conditioning=wrong)
        points.append(
            SweepPoint(value=value, report=report, wall_seconds=time.perf_counter() - t0)
        )
    return points
