"""Command-line entry point.

Every command is driven by one config file (plus ``section.key=value``
overrides) and writes its artifacts, including the resolved config
snapshot, into a run directory named by timestamp and seed.

Exit codes: 0 success, 2 usage, 3 configuration/validation,
4 missing or malformed inputs, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae_mod
from .analytics import (
    MetricReport,
    ProgressionEntry,
    select_fast_progressors,
    stratified_report,
    uncertainty_distance_trend,
)
from .autoencoder import AeDescriptor, AeTrainConfig, AutoencoderParams, train_autoencoder
from .checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .control import (
    ControlParams,
    ControlTrainConfig,
    VisitPair,
    init_controlnet,
    train_controlnet,
)
from .covariates import REGIONS
from .denoiser import (
    DenoiserDescriptor,
    DenoiserParams,
    LdmTrainConfig,
    init_denoiser,
    train_ldm,
)
from .diffusion import DiffusionConfig, SamplerConfig, build_schedule
from .engine import ModelBundle, PredictionRequest, SubjectMetadata, las_predict, write_prediction_bundle
from .errors import ConfigError, NumericError
from .metrics import SsimConfig, image_mse, image_ssim, region_maes_for_row
from .phantoms import PhantomSpec, generate_cohort, measure_fractions
from .progression import (
    LmSample,
    SubjectHistory,
    VisitRecord,
    fit_dcm,
    fit_lm,
    read_dcm_model,
    read_lm_model,
    write_dcm_model,
    write_lm_model,
)
from .sweeps import EvalContext, build_eval_cases, evaluate_cases, sweep_harness
from .volio import Manifest, VolumeFormatError, read_manifest, read_volume

log = logging.getLogger("brainprog")

COMMANDS = (
    "synth", "train-ae", "train-ldm", "train-cn", "fit-aux",
    "predict", "evaluate", "sweep", "select",
)


def _run_dir(cfg: RunConfig, command: str, out: str | None) -> Path:
    if out:
        path = Path(out)
    else:
        root = Path(os.environ.get("BRAINPROG_RUNS", cfg.get("run", "output_root")))
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = root / f"{stamp}-seed{cfg.get('run', 'seed')}-{command}"
        n = 0
        while path.exists():
            n += 1
            path = root / f"{stamp}-seed{cfg.get('run', 'seed')}-{command}-{n}"
    path.mkdir(parents=True, exist_ok=True)
    cfg.write(path / "resolved.ini")
    return path


def _phantom_spec(cfg: RunConfig) -> PhantomSpec:
    return PhantomSpec(
        grid_size=cfg.get("data", "grid_size"),
        noise_std=cfg.get("data", "noise_std"),
        dynamics=cfg.get("data", "dynamics"),
    )


def _schedule(cfg: RunConfig):
    return build_schedule(
        DiffusionConfig(
            T=cfg.get("ldm", "T"),
            beta_start=cfg.get("ldm", "beta_start"),
            beta_end=cfg.get("ldm", "beta_end"),
            schedule_kind=cfg.get("ldm", "schedule"),
        )
    )


def split_subjects(manifest: Manifest, train_fraction: float, seed: int):
    subjects = manifest.subjects()
    order = np.random.default_rng(seed).permutation(len(subjects))
    n_train = int(round(train_fraction * len(subjects)))
    train = [subjects[i] for i in sorted(order[:n_train])]
    rest = [subjects[i] for i in sorted(order[n_train:])]
    return train, rest


def _train_volumes(manifest: Manifest, subject_ids) -> list:
    rows = [r for r in manifest.rows if r.subject_id in set(subject_ids)]
    return rows, [read_volume(manifest.resolve(r)) for r in rows]


def cmd_synth(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "synth", args.out)
    generate_cohort(
        _phantom_spec(cfg),
        n_subjects=cfg.get("data", "n_subjects"),
        visits_per_subject=cfg.get("data", "visits_per_subject"),
        age_range=(cfg.get("data", "age_min"), cfg.get("data", "age_max")),
        seed=cfg.get("run", "seed"),
        out_dir=out / "cohort",
        jobs=cfg.get("run", "jobs"),
    )
    log.info("cohort written to %s", out / "cohort")
    return out


def cmd_train_ae(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "train-ae", args.out)
    manifest = read_manifest(args.manifest)
    manifest.validate_paths()
    train_ids, _ = split_subjects(manifest, cfg.get("data", "train_fraction"), cfg.get("run", "seed"))
    _, volumes = _train_volumes(manifest, train_ids)
    desc = AeDescriptor(
        volume_shape=volumes[0].shape,
        spacing_mm=volumes[0].spacing_mm,
        factor=cfg.get("autoencoder", "factor"),
        latent_channels=cfg.get("autoencoder", "latent_channels"),
        base_channels=cfg.get("autoencoder", "base_channels"),
    )
    params = train_autoencoder(
        volumes,
        AeTrainConfig(
            iterations=cfg.get("autoencoder", "iterations"),
            batch_size=cfg.get("autoencoder", "batch_size"),
            lr=cfg.get("autoencoder", "lr"),
            kl_weight=cfg.get("autoencoder", "kl_weight"),
            val_fraction=cfg.get("autoencoder", "val_fraction"),
        ),
        seed=cfg.get("run", "seed"),
        descriptor=desc,
    )
    _write_history(out / "training_curve.csv", params.history, ("step", "train_loss", "val_loss"))
    digest = save_checkpoint(params.to_blob(), out / "autoencoder.ckpt")
    log.info("autoencoder checkpoint %s (%s)", out / "autoencoder.ckpt", digest[:12])
    return out


def _encode_rows(params: AutoencoderParams, manifest: Manifest, rows):
    return [ae_mod.encode(params, read_volume(manifest.resolve(r))) for r in rows]


def cmd_train_ldm(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "train-ldm", args.out)
    manifest = read_manifest(args.manifest)
    ae_params = AutoencoderParams.from_blob(load_checkpoint(args.autoencoder, "autoencoder"))
    train_ids, _ = split_subjects(manifest, cfg.get("data", "train_fraction"), cfg.get("run", "seed"))
    rows, _ = _train_volumes(manifest, train_ids)
    latents = _encode_rows(ae_params, manifest, rows)
    dataset = [(z, r.covariates()) for z, r in zip(latents, rows)]

    desc = DenoiserDescriptor(
        latent_shape=ae_params.descriptor.latent_shape,
        base_channels=cfg.get("ldm", "base_channels"),
        time_dim=cfg.get("ldm", "time_dim"),
        ctx_dim=cfg.get("ldm", "ctx_dim"),
    )
    sched = _schedule(cfg)
    params = init_denoiser(desc, seed=cfg.get("run", "seed"), T=sched.T)
    params = train_ldm(
        params,
        dataset,
        sched,
        LdmTrainConfig(
            iterations=cfg.get("ldm", "iterations"),
            batch_size=cfg.get("ldm", "batch_size"),
            lr=cfg.get("ldm", "lr"),
        ),
        seed=cfg.get("run", "seed"),
    )
    _write_history(out / "training_curve.csv", params.history, ("step", "loss"))
    digest = save_checkpoint(params.to_blob(), out / "denoiser.ckpt")
    log.info("denoiser checkpoint %s (%s)", out / "denoiser.ckpt", digest[:12])
    return out


def cmd_train_cn(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "train-cn", args.out)
    manifest = read_manifest(args.manifest)
    ae_params = AutoencoderParams.from_blob(load_checkpoint(args.autoencoder, "autoencoder"))
    theta = DenoiserParams.from_blob(load_checkpoint(args.ldm, "denoiser"))
    train_ids, _ = split_subjects(manifest, cfg.get("data", "train_fraction"), cfg.get("run", "seed"))

    pairs = []
    for sid in train_ids:
        visits = manifest.visits(sid)
        latents = _encode_rows(ae_params, manifest, visits)
        for i in range(len(visits)):
            for j in range(i + 1, len(visits)):
                pairs.append(
                    VisitPair(
                        z_a=latents[i],
                        age_a=visits[i].visit_age,
                        z_b=latents[j],
                        cov_b=visits[j].covariates(),
                    )
                )

    phi = init_controlnet(theta)
    phi = train_controlnet(
        theta,
        phi,
        pairs,
        _schedule(cfg),
        ControlTrainConfig(
            iterations=cfg.get("controlnet", "iterations"),
            batch_size=cfg.get("controlnet", "batch_size"),
            lr=cfg.get("controlnet", "lr"),
        ),
        seed=cfg.get("run", "seed"),
    )
    _write_history(out / "training_curve.csv", phi.history, ("step", "loss"))
    digest = save_checkpoint(phi.to_blob(), out / "controlnet.ckpt")
    log.info("controlnet checkpoint %s (%s)", out / "controlnet.ckpt", digest[:12])
    return out


def cmd_fit_aux(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "fit-aux", args.out)
    manifest = read_manifest(args.manifest)
    train_ids, _ = split_subjects(manifest, cfg.get("data", "train_fraction"), cfg.get("run", "seed"))

    samples, histories = [], []
    for sid in train_ids:
        visits = manifest.visits(sid)
        for i in range(len(visits)):
            for j in range(i + 1, len(visits)):
                samples.append(
                    LmSample(
                        cov_a=visits[i].covariates(),
                        age_b=visits[j].visit_age,
                        v_b=dict(visits[j].fractions),
                    )
                )
        histories.append(
            SubjectHistory(
                subject_id=sid,
                visits=tuple(VisitRecord(v.visit_age, v.covariates()) for v in visits),
            )
        )

    lm = fit_lm(samples, delta=cfg.get("aux", "huber_delta"))
    dcm = fit_dcm(histories, iterations=cfg.get("aux", "dcm_iterations"))
    write_lm_model(lm, out / "aux_lm.txt")
    write_dcm_model(dcm, out / "aux_dcm.txt")
    log.info("auxiliary models written to %s", out)
    return out


def _load_bundle(args, cfg: RunConfig) -> ModelBundle:
    bundle = ModelBundle(
        autoencoder=AutoencoderParams.from_blob(load_checkpoint(args.autoencoder, "autoencoder")),
        denoiser=DenoiserParams.from_blob(load_checkpoint(args.ldm, "denoiser")),
        control=ControlParams.from_blob(load_checkpoint(args.controlnet, "controlnet")),
        lm=read_lm_model(args.aux_lm) if getattr(args, "aux_lm", None) else None,
        dcm=read_dcm_model(args.aux_dcm) if getattr(args, "aux_dcm", None) else None,
        schedule=_schedule(cfg),
    )
    bundle.validate()
    return bundle


def _eval_context(args, cfg: RunConfig, manifest: Manifest) -> EvalContext:
    bundle = _load_bundle(args, cfg)
    _, eval_ids = split_subjects(manifest, cfg.get("data", "train_fraction"), cfg.get("run", "seed"))
    cases = build_eval_cases(manifest, eval_ids, mode=cfg.get("inference", "mode"))
    return EvalContext(
        models=bundle,
        cases=cases,
        phantom_spec=_phantom_spec(cfg),
        las_m=cfg.get("inference", "las_m"),
        sampler=SamplerConfig(
            num_inference_steps=cfg.get("inference", "ddim_steps"),
            eta=cfg.get("inference", "eta"),
        ),
        base_seed=cfg.get("run", "seed"),
        ssim=SsimConfig(window=cfg.get("evaluation", "ssim_window")),
    )


def cmd_predict(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "predict", args.out)
    manifest = read_manifest(args.manifest)
    ctx = _eval_context(args, cfg, manifest)
    pred_dir = out / "predictions"
    index_rows = []
    for i, case in enumerate(ctx.cases):
        req = PredictionRequest(
            source_volume=case.source_volume,
            source_covariates=case.source_covariates,
            target_metadata=SubjectMetadata(case.target_age, case.sex, case.cognitive_status),
            history=case.history,
            las_m=ctx.las_m,
            sampler=ctx.sampler,
            base_seed=ctx.base_seed + 1000 * i,
            aux_mode=cfg.get("inference", "aux_mode"),
        )
        result = las_predict(ctx.models, req)
        stem = f"{case.subject_id}_to_{case.target_age:.2f}".replace(".", "p")
        write_prediction_bundle(result, req, ctx.models, pred_dir, stem)
        index_rows.append(
            [case.subject_id, f"{case.source_covariates.age_years:.6f}",
             f"{case.target_age:.6f}", case.sex, case.cognitive_status, stem,
             "" if result.global_uncertainty is None else f"{result.global_uncertainty:.12e}",
             str(result.m_used)]
        )
    with open(pred_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject_id", "source_age", "target_age", "sex", "cognitive_status",
             "stem", "u", "m_used"]
        )
        writer.writerows(index_rows)
    log.info("wrote %d prediction bundles to %s", len(index_rows), pred_dir)
    return out


def cmd_evaluate(args, cfg: RunConfig) -> Path:
    from .analytics import MetricRow
    from .plots import save_report_figure, save_uncertainty_trend_figure

    out = _run_dir(cfg, "evaluate", args.out)
    manifest = read_manifest(args.manifest)
    pred_dir = Path(args.predictions)
    spec = _phantom_spec(cfg)
    ssim_cfg = SsimConfig(window=cfg.get("evaluation", "ssim_window"))

    truth = {}
    for row in manifest.rows:
        truth[(row.subject_id, round(row.visit_age, 6))] = row

    rows = []
    with open(pred_dir / "index.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["subject_id"], round(float(rec["target_age"]), 6))
            if key not in truth:
                raise ValueError(f"prediction {rec['stem']} has no ground-truth visit")
            true_row = truth[key]
            true_vol = read_volume(manifest.resolve(true_row))
            pred_vol = read_volume(pred_dir / f"{rec['stem']}.vol")
            pred_fracs = measure_fractions(pred_vol, spec)
            rows.append(
                MetricRow(
                    subject_id=rec["subject_id"],
                    source_age=float(rec["source_age"]),
                    target_age=float(rec["target_age"]),
                    mse=image_mse(pred_vol, true_vol),
                    ssim=image_ssim(pred_vol, true_vol, ssim_cfg),
                    mae=region_maes_for_row(pred_fracs, dict(true_row.fractions)),
                    u=float(rec["u"]) if rec["u"] else None,
                    sex=rec["sex"],
                    cognitive_status=rec["cognitive_status"],
                )
            )
    report = stratified_report(rows, strata_key=cfg.get("evaluation", "strata"), ssim_config=ssim_cfg)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.summary_text())
    save_report_figure(report, out / "report.png")

    # uncertainty-vs-distance trend over subjects with several predictions
    by_subject: dict[str, list[MetricRow]] = {}
    for row in rows:
        if row.u is not None:
            by_subject.setdefault(row.subject_id, []).append(row)
    trend_rows = []
    for sid, rs in by_subject.items():
        if len(rs) < 2:
            continue
        rs = sorted(rs, key=lambda r: r.target_age)
        u1 = rs[0].u
        trend_rows += [(sid, r.delta_b, r.u - u1) for r in rs]
    if len(trend_rows) >= 4:
        beta_db, beta_db2, r2 = uncertainty_distance_trend(trend_rows)
        save_uncertainty_trend_figure(trend_rows, beta_db, beta_db2, out / "uncertainty_trend.png")
        (out / "uncertainty_trend.txt").write_text(
            f"beta_delta_b = {beta_db!r}\nbeta_delta_b_sq = {beta_db2!r}\nr_squared = {r2!r}\n"
        )
    log.info("report written to %s", out)
    return out


_DEFAULT_GRIDS = {
    "las_m": "1,2,4,8,16,32,64",
    "ddim_steps": "2,5,10,15,25",
    "aux_onoff": "on,off",
    "wrong_conditioning": "correct,wrong",
}


def cmd_sweep(args, cfg: RunConfig) -> Path:
    from .plots import save_metric_vs_grid

    out = _run_dir(cfg, "sweep", args.out)
    manifest = read_manifest(args.manifest)
    ctx = _eval_context(args, cfg, manifest)
    raw_grid = args.grid or _DEFAULT_GRIDS[args.kind]
    if args.kind in ("las_m", "ddim_steps"):
        grid = [int(v) for v in raw_grid.split(",")]
    else:
        grid = raw_grid.split(",")
    points = sweep_harness(args.kind, grid, ctx)

    combined = [["value", "wall_seconds"] + ["mean_" + m for m in ("mse", "ssim")]]
    for p in points:
        p.report.to_csv(out / f"sweep_{args.kind}_{p.value}.csv")
        agg = p.report.aggregates()["all"]
        combined.append(
            [str(p.value), f"{p.wall_seconds:.3f}", f"{agg['mse'][0]:.12e}", f"{agg['ssim'][0]:.12e}"]
        )
    with open(out / "sweep_combined.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(combined)
    for metric in ("mse", "ssim", "mae_lateral_ventricles"):
        save_metric_vs_grid(points, metric, out / f"sweep_{metric}.png", xlabel=args.kind)
    log.info("sweep results written to %s", out)
    return out


def cmd_select(args, cfg: RunConfig) -> Path:
    out = _run_dir(cfg, "select", args.out)
    manifest = read_manifest(args.manifest)
    bundle = _load_bundle(args, cfg)
    spec = _phantom_spec(cfg)
    horizon = cfg.get("evaluation", "horizon_years")
    _, eval_ids = split_subjects(manifest, cfg.get("data", "train_fraction"), cfg.get("run", "seed"))

    entries = []
    for i, sid in enumerate(eval_ids):
        visits = manifest.visits(sid)
        source = visits[0]
        target = next(
            (v for v in visits if abs(v.visit_age - source.visit_age - horizon) < 1e-6), None
        )
        if target is None:
            continue
        req = PredictionRequest(
            source_volume=read_volume(manifest.resolve(source)),
            source_covariates=source.covariates(),
            target_metadata=SubjectMetadata(target.visit_age, source.sex, source.diagnosis),
            history=None,
            las_m=cfg.get("inference", "las_m"),
            sampler=SamplerConfig(
                num_inference_steps=cfg.get("inference", "ddim_steps"),
                eta=cfg.get("inference", "eta"),
            ),
            base_seed=cfg.get("run", "seed") + 1000 * i,
            aux_mode=cfg.get("inference", "aux_mode"),
        )
        result = las_predict(bundle, req)
        pred_fracs = measure_fractions(result.predicted_volume, spec)
        entries.append(
            ProgressionEntry(
                subject_id=sid,
                v_source=source.fractions["hippocampus"],
                v_predicted=pred_fracs["hippocampus"],
                v_true=target.fractions["hippocampus"],
            )
        )
    if not entries:
        raise ValueError(f"no subjects with a +{horizon}y follow-up visit")

    sizes = [int(s) for s in str(cfg.get("evaluation", "select_sizes")).split(",")]
    with open(out / "selection.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "efficacy", "random_baseline", "n_subjects", "selected"])
        for size in sizes:
            res = select_fast_progressors(entries, size)
            writer.writerow(
                [res.size, f"{res.efficacy:.6f}", f"{res.random_baseline:.6f}",
                 len(entries), ";".join(res.selected)]
            )
    log.info("selection results written to %s", out)
    return out


def _write_history(path: Path, history, header) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(history)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainprog",
        description="Latent-diffusion progression modeling on phantom cohorts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False, models=False, aux=False):
        p.add_argument("--config", default=None, help="config file (INI)")
        p.add_argument("--out", default=None, help="run directory (default: timestamped)")
        p.add_argument("overrides", nargs="*", help="section.key=value overrides")
        if manifest:
            p.add_argument("--manifest", required=True, help="cohort manifest CSV")
        if models:
            p.add_argument("--autoencoder", required=True)
            p.add_argument("--ldm", required=True)
            p.add_argument("--controlnet", required=True)
        if aux:
            p.add_argument("--aux-lm", default=None)
            p.add_argument("--aux-dcm", default=None)

    common(sub.add_parser("synth", help="generate a phantom cohort"))
    common(sub.add_parser("train-ae", help="train the volume autoencoder"), manifest=True)

    p = sub.add_parser("train-ldm", help="train the conditional denoiser")
    common(p, manifest=True)
    p.add_argument("--autoencoder", required=True)

    p = sub.add_parser("train-cn", help="train the anatomy control module")
    common(p, manifest=True)
    p.add_argument("--autoencoder", required=True)
    p.add_argument("--ldm", required=True)

    common(sub.add_parser("fit-aux", help="fit the auxiliary progression models"), manifest=True)
    common(sub.add_parser("predict", help="predict follow-ups for held-out subjects"),
           manifest=True, models=True, aux=True)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p, manifest=True)
    p.add_argument("--predictions", required=True, help="predictions directory from `predict`")

    p = sub.add_parser("sweep", help="run a setting sweep")
    common(p, manifest=True, models=True, aux=True)
    p.add_argument("--kind", required=True, choices=list(_DEFAULT_GRIDS))
    p.add_argument("--grid", default=None, help="comma-separated grid values")

    common(sub.add_parser("select", help="rank fast progressors"), manifest=True,
           models=True, aux=True)
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train-ae": cmd_train_ae,
    "train-ldm": cmd_train_ldm,
    "train-cn": cmd_train_cn,
    "fit-aux": cmd_fit_aux,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "select": cmd_select,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        _HANDLERS[args.command](args, cfg)
        return 0
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 3
    except (FileNotFoundError, OSError, VolumeFormatError, CheckpointError) as exc:
        log.error("input error: %s", exc)
        return 4
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 5
    except ValueError as exc:
        log.error("validation error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
