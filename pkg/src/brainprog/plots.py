"""Figure rendering for reports and sweeps (PNG files next to the CSVs)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analytics import MetricReport
from .sweeps import SweepPoint


def save_metric_vs_grid(
    points: list[SweepPoint], metric: str, path: str | Path, xlabel: str
) -> None:
    xs, means, sds = [], [], []
    for p in points:
        agg = p.report.aggregates()["all"]
        if metric not in agg:
            continue
        xs.append(p.value)
        means.append(agg[metric][0])
        sds.append(agg[metric][1])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(range(len(xs)), means, yerr=sds, marker="o", capsize=3)
    ax.set_xticks(range(len(xs)))
    ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_figure(report: MetricReport, path: str | Path) -> None:
    metrics = ["mse", "ssim", "mae_hippocampus", "mae_lateral_ventricles"]
    agg = report.aggregates()
    strata = list(agg)
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2))
    for ax, metric in zip(np.atleast_1d(axes), metrics):
        means = [agg[s].get(metric, (np.nan, np.nan))[0] for s in strata]
        sds = [agg[s].get(metric, (np.nan, np.nan))[1] for s in strata]
        ax.bar(range(len(strata)), means, yerr=sds, capsize=3, color="#4878a8")
        ax.set_xticks(range(len(strata)))
        ax.set_xticklabels(strata, rotation=30, ha="right")
        ax.set_title(metric, fontsize=10)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_uncertainty_trend_figure(
    rows: list[tuple[str, float, float]],
    beta_db: float,
    beta_db2: float,
    path: str | Path,
) -> None:
    db = np.array([r[1] for r in rows])
    du = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(db, du, s=12, alpha=0.5, label="predictions")
    grid = np.linspace(0, db.max() if len(db) else 1.0, 100)
    ax.plot(grid, beta_db * grid + beta_db2 * grid**2, "k-", label="fixed-effects fit")
    ax.set_xlabel("prediction distance (years)")
    ax.set_ylabel("uncertainty difference")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
