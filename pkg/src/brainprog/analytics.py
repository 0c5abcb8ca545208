"""Measurement machinery: metric reports, trend fits, progressor selection.

The trend analyses use a within-subject demeaning (fixed-effects)
estimator: response and regressors are centered per subject, then pooled
OLS through the origin recovers the shared coefficients. This targets the
same fixed coefficients as a mixed-effects model with subject intercepts,
without the covariance estimation; reports carry coefficients and R² only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .covariates import REGIONS
from .errors import NumericError
from .metrics import SsimConfig

STRATUM_KEYS = ("cognitive_status", "sex", "all")


@dataclass(frozen=True)
class MetricRow:
    """Per-prediction evaluation record."""

    subject_id: str
    source_age: float
    target_age: float
    mse: float
    ssim: float
    mae: dict[str, float]  # percentage points per region
    u: float | None
    sex: str
    cognitive_status: str

    @property
    def delta_b(self) -> float:
        return self.target_age - self.source_age

    def scalar(self, metric: str) -> float | None:
        if metric in ("mse", "ssim"):
            return getattr(self, metric)
        if metric == "u":
            return self.u
        if metric.startswith("mae_"):
            return self.mae[metric[4:]]
        raise KeyError(metric)


_METRIC_NAMES = ("mse", "ssim") + tuple(f"mae_{r}" for r in REGIONS) + ("u",)


@dataclass
class MetricReport:
    rows: list[MetricRow]
    strata_key: str = "all"
    ssim_config: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if self.strata_key not in STRATUM_KEYS:
            raise ValueError(f"unknown stratum key {self.strata_key!r}; use one of {STRATUM_KEYS}")
        if not self.rows:
            raise ValueError("a metric report needs at least one row")

    def strata(self) -> dict[str, list[MetricRow]]:
        if self.strata_key == "all":
            return {"all": list(self.rows)}
        groups: dict[str, list[MetricRow]] = {}
        for row in self.rows:
            groups.setdefault(getattr(row, self.strata_key), []).append(row)
        return groups

    def aggregates(self) -> dict[str, dict[str, tuple[float, float]]]:
        """Per stratum, per metric: (mean, SD). Recomputed from rows on demand."""
        out: dict[str, dict[str, tuple[float, float]]] = {}
        for stratum, rows in self.strata().items():
            agg = {}
            for metric in _METRIC_NAMES:
                vals = [row.scalar(metric) for row in rows]
                vals = [v for v in vals if v is not None]
                if vals:
                    arr = np.asarray(vals, dtype=np.float64)
                    agg[metric] = (float(arr.mean()), float(arr.std(ddof=0)))
            out[stratum] = agg
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["subject_id", "source_age", "target_age", "delta_b", "mse", "ssim"]
                + [f"mae_{r}" for r in REGIONS]
                + ["u", "sex", "cognitive_status"]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        row.subject_id,
                        f"{row.source_age:.6f}",
                        f"{row.target_age:.6f}",
                        f"{row.delta_b:.6f}",
                        f"{row.mse:.12e}",
                        f"{row.ssim:.12e}",
                    ]
                    + [f"{row.mae[r]:.12e}" for r in REGIONS]
                    + ["" if row.u is None else f"{row.u:.12e}", row.sex, row.cognitive_status]
                )

    def summary_text(self) -> str:
        lines = [
            f"rows: {len(self.rows)}   stratified by: {self.strata_key}",
            f"ssim: window={self.ssim_config.window} k1={self.ssim_config.k1} "
            f"k2={self.ssim_config.k2} range={self.ssim_config.data_range}",
        ]
        for stratum, agg in self.aggregates().items():
            lines.append(f"[{stratum}] (n={len(self.strata()[stratum])})")
            for metric, (mean, sd) in agg.items():
                lines.append(f"  {metric:28s} {mean:.6f} +/- {sd:.6f}")
        return "\n".join(lines) + "\n"


def read_report_csv(path: str | Path) -> MetricReport:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                MetricRow(
                    subject_id=rec["subject_id"],
                    source_age=float(rec["source_age"]),
                    target_age=float(rec["target_age"]),
                    mse=float(rec["mse"]),
                    ssim=float(rec["ssim"]),
                    mae={r: float(rec[f"mae_{r}"]) for r in REGIONS},
                    u=float(rec["u"]) if rec["u"] else None,
                    sex=rec["sex"],
                    cognitive_status=rec["cognitive_status"],
                )
            )
    return MetricReport(rows=rows)


def stratified_report(
    rows: list[MetricRow], strata_key: str = "all", ssim_config: SsimConfig | None = None
) -> MetricReport:
    return MetricReport(
        rows=list(rows),
        strata_key=strata_key,
        ssim_config=ssim_config or SsimConfig(),
    )


# ---------------------------------------------------------------------------
# Within-subject (fixed-effects) trend estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrendFit:
    coefficients: tuple[float, ...]
    r_squared: float
    n_rows: int
    degenerate: bool = False


def fixed_effects_fit(
    subjects: list[str], X: np.ndarray, y: np.ndarray
) -> TrendFit:
    """Demean X and y within subject, then OLS through the origin."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(subjects) != len(y):
        raise ValueError("subjects, X rows, and y must align")
    counts: dict[str, int] = {}
    for s in subjects:
        counts[s] = counts.get(s, 0) + 1
    if any(c < 2 for c in counts.values()):
        bad = [s for s, c in counts.items() if c < 2]
        raise ValueError(f"subjects with < 2 rows cannot be demeaned: {bad}")

    Xd = X.copy()
    yd = y.copy()
    for s in counts:
        idx = [i for i, sid in enumerate(subjects) if sid == s]
        Xd[idx] -= Xd[idx].mean(axis=0)
        yd[idx] -= yd[idx].mean()

    if np.allclose(Xd, 0.0):
        if np.allclose(yd, 0.0):
            # constant response and regressors: coefficients are all zero
            return TrendFit(
                coefficients=tuple(0.0 for _ in range(X.shape[1])),
                r_squared=1.0,
                n_rows=len(y),
                degenerate=True,
            )
        raise NumericError("all regressors are constant within subjects; fit is degenerate")

    beta, *_ = np.linalg.lstsq(Xd, yd, rcond=None)
    resid = yd - Xd @ beta
    sst = float(np.sum(yd**2))
    r2 = 1.0 - float(np.sum(resid**2)) / sst if sst > 0 else 1.0
    return TrendFit(coefficients=tuple(float(b) for b in beta), r_squared=r2, n_rows=len(y))


def uncertainty_distance_trend(
    rows: list[tuple[str, float, float]]
) -> tuple[float, float, float]:
    """Fit delta-u on [delta_B, delta_B^2]; returns (beta_dB, beta_dB2, R^2)."""
    subjects = [r[0] for r in rows]
    db = np.array([r[1] for r in rows], dtype=np.float64)
    du = np.array([r[2] for r in rows], dtype=np.float64)
    fit = fixed_effects_fit(subjects, np.column_stack([db, db**2]), du)
    return fit.coefficients[0], fit.coefficients[1], fit.r_squared


def uncertainty_error_association(
    rows: list[tuple[str, float, float, float]]
) -> dict[str, TrendFit]:
    """Fit MSE and SSIM on u^2; rows are (subject, u2, mse, ssim)."""
    subjects = [r[0] for r in rows]
    u2 = np.array([r[1] for r in rows], dtype=np.float64)[:, None]
    out = {}
    for name, col in (("mse", 2), ("ssim", 3)):
        y = np.array([r[col] for r in rows], dtype=np.float64)
        try:
            out[name] = fixed_effects_fit(subjects, u2, y)
        except NumericError:
            out[name] = TrendFit(coefficients=(float("nan"),), r_squared=float("nan"),
                                 n_rows=len(rows), degenerate=True)
    return out


# ---------------------------------------------------------------------------
# Fast-progressor selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProgressionEntry:
    subject_id: str
    v_source: float  # hippocampal fraction at the source visit
    v_predicted: float  # predicted fraction at the horizon
    v_true: float  # observed fraction at the horizon


@dataclass(frozen=True)
class SelectionResult:
    size: int
    selected: tuple[str, ...]
    true_top: tuple[str, ...]
    efficacy: float
    random_baseline: float
    excluded: tuple[str, ...] = ()


def select_fast_progressors(entries: list[ProgressionEntry], size: int) -> SelectionResult:
    """Rank by predicted relative hippocampal reduction; score the overlap.

    Ties break by subject id for a stable, reproducible ordering. Subjects
    with zero source volume cannot define a relative reduction and are
    excluded (flagged in the result).
    """
    if size < 1:
        raise ValueError("selection size must be >= 1")
    excluded = tuple(e.subject_id for e in entries if e.v_source == 0.0)
    usable = [e for e in entries if e.v_source != 0.0]
    if not usable:
        raise ValueError("no usable subjects (all have zero source volume)")
    s = min(size, len(usable))

    def ranked(key) -> list[str]:
        return [
            e.subject_id
            for e in sorted(usable, key=lambda e: (-key(e), e.subject_id))
        ]

    pred_rank = ranked(lambda e: (e.v_source - e.v_predicted) / e.v_source)
    true_rank = ranked(lambda e: (e.v_source - e.v_true) / e.v_source)
    selected = tuple(pred_rank[:s])
    true_top = tuple(true_rank[:s])
    overlap = len(set(selected) & set(true_top))
    return SelectionResult(
        size=s,
        selected=selected,
        true_top=true_top,
        efficacy=overlap / s,
        random_baseline=s / len(usable),
        excluded=excluded,
    )
