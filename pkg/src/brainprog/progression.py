"""Auxiliary progression models: predict region fractions at a target age.

Two interchangeable estimators:

* ``LmModel`` — per-region robust linear regression (Huber loss via
  iteratively reweighted least squares) over [age A, age B, diagnosis
  one-hot, sex, source fractions]. Serves subjects with a single visit.
* ``DcmModel`` — a simplified disease-course model: one logistic population
  trajectory per region per cognitive status, plus a per-subject affine
  time reparameterization psi_i(t) = exp(xi_i) * (t - t0 - tau_i) + t0.
  Fit by alternating least squares; serves subjects with visit histories.

Both expose the same (history -> fractions at age B) surface so the
inference engine can route between them.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariates import REGIONS, SEXES, STATUSES, Covariates
from .errors import NumericError

_IRLS_TOL = 1e-8
_IRLS_MAX_ITER = 200
_EFFECT_PENALTY = 1e-6  # shrinkage on (xi, tau); resolves warp/population degeneracy


@dataclass(frozen=True)
class VisitRecord:
    age_years: float
    covariates: Covariates

    def __post_init__(self):
        if not np.isfinite(self.age_years) or self.age_years < 0:
            raise ValueError(f"visit age must be finite and >= 0, got {self.age_years}")


@dataclass(frozen=True)
class SubjectHistory:
    subject_id: str
    visits: tuple[VisitRecord, ...]

    def __post_init__(self):
        if len(self.visits) < 1:
            raise ValueError(f"subject {self.subject_id}: history needs >= 1 visit")
        ages = [v.age_years for v in self.visits]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError(f"subject {self.subject_id}: visit ages must strictly increase")
        object.__setattr__(self, "visits", tuple(self.visits))

    @property
    def status(self) -> str:
        return self.visits[-1].covariates.cognitive_status


# ---------------------------------------------------------------------------
# Robust linear model
# ---------------------------------------------------------------------------

LM_FEATURES = ("age_a", "age_b", "dx_cn", "dx_mci", "dx_ad", "sex") + tuple(
    f"v_{r}" for r in REGIONS
)


def huber_loss(residuals: np.ndarray, delta: float, scale: float = 1.0) -> float:
    """Summed Huber loss of residuals at threshold delta * scale."""
    r = np.abs(np.asarray(residuals, dtype=np.float64))
    k = delta * scale
    quad = r <= k
    return float(np.sum(0.5 * r[quad] ** 2) + np.sum(k * (r[~quad] - 0.5 * k)))


def _lm_features(cov_a: Covariates, age_b: float) -> np.ndarray:
    x = np.zeros(len(LM_FEATURES), dtype=np.float64)
    x[0] = cov_a.age_years
    x[1] = age_b
    x[2 + STATUSES.index(cov_a.cognitive_status)] = 1.0
    x[5] = float(SEXES.index(cov_a.sex))
    for i, r in enumerate(REGIONS):
        x[6 + i] = cov_a.region_fractions[r]
    return x


@dataclass(frozen=True)
class LmSample:
    cov_a: Covariates
    age_b: float
    v_b: dict[str, float]


@dataclass
class LmModel:
    huber_delta: float
    coefficients: dict[str, np.ndarray]  # region -> [intercept, *LM_FEATURES]
    rank_deficient: bool = False

    def __post_init__(self):
        want = len(LM_FEATURES) + 1
        for r, c in self.coefficients.items():
            if len(c) != want:
                raise ValueError(f"region {r}: expected {want} coefficients, got {len(c)}")


def _mad_scale(residuals: np.ndarray) -> float:
    return float(np.median(np.abs(residuals - np.median(residuals))) / 0.6745)


def fit_lm(samples: list[LmSample], delta: float = 1.35) -> LmModel:
    """Per-region Huber IRLS fit of target fractions on source covariates.

    The threshold applies to MAD-standardized residuals (delta=1.35 is the
    classical 95%-efficiency choice). On data whose residual MAD is zero
    the fit reduces to ordinary least squares.
    """
    n_feat = len(LM_FEATURES) + 1
    if len(samples) < n_feat:
        raise ValueError(f"need >= {n_feat} samples, got {len(samples)}")
    X = np.hstack(
        [
            np.ones((len(samples), 1)),
            np.stack([_lm_features(s.cov_a, s.age_b) for s in samples]),
        ]
    )
    rank = np.linalg.matrix_rank(X)
    rank_deficient = rank < n_feat

    coefficients: dict[str, np.ndarray] = {}
    for r in REGIONS:
        y = np.array([s.v_b[r] for s in samples], dtype=np.float64)
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        for _ in range(_IRLS_MAX_ITER):
            resid = y - X @ beta
            scale = _mad_scale(resid)
            if scale <= 0.0:
                break
            k = delta * scale
            w = np.minimum(1.0, k / np.maximum(np.abs(resid), 1e-300))
            sw = np.sqrt(w)
            new_beta = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
            change = np.max(np.abs(new_beta - beta)) / max(1.0, np.max(np.abs(beta)))
            beta = new_beta
            if change < _IRLS_TOL:
                break
        coefficients[r] = beta
    return LmModel(huber_delta=delta, coefficients=coefficients, rank_deficient=rank_deficient)


def predict_lm(model: LmModel, cov_a: Covariates, target_age: float) -> dict[str, float]:
    """Predicted region fractions at the target age, clipped to [0, 1]."""
    if target_age < cov_a.age_years:
        raise ValueError(f"target age {target_age} < source age {cov_a.age_years}")
    x = np.concatenate([[1.0], _lm_features(cov_a, target_age)])
    return {r: float(np.clip(model.coefficients[r] @ x, 0.0, 1.0)) for r in REGIONS}


# ---------------------------------------------------------------------------
# Simplified disease-course model
# ---------------------------------------------------------------------------


@dataclass
class RegionCurve:
    rate: float  # logistic rate a > 0, in normalized units
    midpoint: float  # t0 in years
    inverted: bool
    vmin: float
    vmax: float
    degenerate: bool = False
    constant: float = 0.0  # raw-scale value used when degenerate

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return np.clip((values - self.vmin) / (self.vmax - self.vmin), 0.0, 1.0)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return self.vmin + values * (self.vmax - self.vmin)


@dataclass
class DcmStatusModel:
    curves: dict[str, RegionCurve]
    subject_effects: dict[str, tuple[float, float]]  # id -> (xi, tau)


@dataclass
class DcmModel:
    by_status: dict[str, DcmStatusModel]
    iterations: int


def _sigmoid(q: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(q, -50.0, 50.0)))


_RATE_FLOOR = 1e-3
_RATE_CEIL = 20.0


def _fit_status_group(
    histories: list[SubjectHistory], iterations: int
) -> DcmStatusModel:
    subjects = [h.subject_id for h in histories]
    ages = {h.subject_id: np.array([v.age_years for v in h.visits]) for h in histories}
    values = {
        r: {
            h.subject_id: np.array([v.covariates.region_fractions[r] for v in h.visits])
            for h in histories
        }
        for r in REGIONS
    }

    curves: dict[str, RegionCurve] = {}
    norm_y: dict[str, dict[str, np.ndarray]] = {}
    for r in REGIONS:
        all_vals = np.concatenate([values[r][s] for s in subjects])
        vmin, vmax = float(all_vals.min()), float(all_vals.max())
        if vmax - vmin < 1e-9:
            curves[r] = RegionCurve(
                rate=_RATE_FLOOR, midpoint=0.0, inverted=False, vmin=vmin, vmax=vmax,
                degenerate=True, constant=float(all_vals.mean()),
            )
            continue
        # population trend: pooled within-subject covariance of value vs age
        num = den = 0.0
        for s in subjects:
            t, y = ages[s], values[r][s]
            num += float(np.sum((t - t.mean()) * (y - y.mean())))
            den += float(np.sum((t - t.mean()) ** 2))
        inverted = (num / max(den, 1e-12)) < 0.0
        yn = {
            s: (1.0 - (values[r][s] - vmin) / (vmax - vmin))
            if inverted
            else (values[r][s] - vmin) / (vmax - vmin)
            for s in subjects
        }
        norm_y[r] = yn
        t_all = np.concatenate([ages[s] for s in subjects])
        y_all = np.concatenate([yn[s] for s in subjects])
        slope = float(
            np.sum((t_all - t_all.mean()) * (y_all - y_all.mean()))
            / max(np.sum((t_all - t_all.mean()) ** 2), 1e-12)
        )
        rate0 = float(np.clip(4.0 * max(slope, 0.0125), 0.05, 4.0))
        curves[r] = RegionCurve(
            rate=rate0, midpoint=float(np.median(t_all)), inverted=inverted,
            vmin=vmin, vmax=vmax,
        )

    fit_regions = [r for r in REGIONS if not curves[r].degenerate]
    effects = {s: [0.0, 0.0] for s in subjects}
    t_lo = min(float(ages[s].min()) for s in subjects) - 40.0
    t_hi = max(float(ages[s].max()) for s in subjects) + 40.0

    for _ in range(iterations):
        max_delta = 0.0
        # population step: damped Gauss-Newton on (rate, midpoint) per region
        for r in fit_regions:
            c = curves[r]
            JtJ = np.zeros((2, 2))
            Jte = np.zeros(2)
            for s in subjects:
                xi, tau = effects[s]
                warp = math.exp(xi) * (ages[s] - c.midpoint - tau)
                q = c.rate * warp
                p = _sigmoid(q)
                e = norm_y[r][s] - p
                dp = p * (1.0 - p)
                g_a = dp * warp
                g_t0 = -dp * c.rate * math.exp(xi)
                JtJ[0, 0] += g_a @ g_a
                JtJ[0, 1] += g_a @ g_t0
                JtJ[1, 1] += g_t0 @ g_t0
                Jte[0] += g_a @ e
                Jte[1] += g_t0 @ e
            JtJ[1, 0] = JtJ[0, 1]
            step = np.linalg.solve(JtJ + 1e-9 * np.eye(2), Jte)
            da = float(np.clip(step[0], -0.5 * c.rate, 0.5 * c.rate))
            dt0 = float(np.clip(step[1], -5.0, 5.0))
            c.rate = float(np.clip(c.rate + da, _RATE_FLOOR, _RATE_CEIL))
            c.midpoint = float(np.clip(c.midpoint + dt0, t_lo, t_hi))
            max_delta = max(max_delta, abs(da), abs(dt0))

        # subject step: damped Gauss-Newton on (xi, tau), shared across regions
        for s in subjects:
            xi, tau = effects[s]
            JtJ = np.eye(2) * _EFFECT_PENALTY
            Jte = np.array([-_EFFECT_PENALTY * xi, -_EFFECT_PENALTY * tau])
            for r in fit_regions:
                c = curves[r]
                warp = math.exp(xi) * (ages[s] - c.midpoint - tau)
                q = c.rate * warp
                p = _sigmoid(q)
                e = norm_y[r][s] - p
                dp = p * (1.0 - p)
                g_xi = dp * q
                g_tau = -dp * c.rate * math.exp(xi)
                JtJ[0, 0] += g_xi @ g_xi
                JtJ[0, 1] += g_xi @ g_tau
                JtJ[1, 1] += g_tau @ g_tau
                Jte[0] += g_xi @ e
                Jte[1] += g_tau @ e
            JtJ[1, 0] = JtJ[0, 1]
            step = np.linalg.solve(JtJ + 1e-9 * np.eye(2), Jte)
            dxi = float(np.clip(step[0], -0.2, 0.2))
            dtau = float(np.clip(step[1], -2.0, 2.0))
            effects[s] = [xi + dxi, tau + dtau]
            max_delta = max(max_delta, abs(dxi), abs(dtau))

        # identifiability: recenter subject effects into the population
        # parameters (an exact reparameterization of the model)
        xi_bar = float(np.mean([effects[s][0] for s in subjects]))
        tau_bar = float(np.mean([effects[s][1] for s in subjects]))
        if abs(xi_bar) > 0 or abs(tau_bar) > 0:
            for r in fit_regions:
                curves[r].rate = float(
                    np.clip(curves[r].rate * math.exp(xi_bar), _RATE_FLOOR, _RATE_CEIL)
                )
            for s in subjects:
                xi, tau = effects[s]
                effects[s] = [xi - xi_bar, tau - tau_bar]
            # t0 shift: q = a e^xi (t - t0 - tau) is invariant under
            # tau -> tau - tau_bar, t0 -> t0 + tau_bar
            for r in fit_regions:
                curves[r].midpoint = float(np.clip(curves[r].midpoint + tau_bar, t_lo, t_hi))

        if max_delta < 1e-11:
            break

    return DcmStatusModel(
        curves=curves,
        subject_effects={s: (e[0], e[1]) for s, e in effects.items()},
    )


def fit_dcm(population: list[SubjectHistory], iterations: int = 5000) -> DcmModel:
    """Fit one status model per cognitive group present in the population."""
    if not population:
        raise ValueError("empty population")
    groups: dict[str, list[SubjectHistory]] = {}
    for h in population:
        groups.setdefault(h.status, []).append(h)
    for status, hs in groups.items():
        if len(hs) < 2:
            raise ValueError(f"status {status}: need >= 2 subjects, got {len(hs)}")
        few = [h.subject_id for h in hs if len(h.visits) < 2]
        if few:
            raise ValueError(f"status {status}: subjects with < 2 visits: {few}")
    return DcmModel(
        by_status={s: _fit_status_group(hs, iterations) for s, hs in groups.items()},
        iterations=iterations,
    )


def _personalize(status_model: DcmStatusModel, history: SubjectHistory) -> tuple[float, float]:
    """Least-squares (xi, tau) against the population curves.

    A single visit only resolves placement in time, so xi stays 0 there.
    """
    t = np.array([v.age_years for v in history.visits])
    fit_regions = [r for r in REGIONS if not status_model.curves[r].degenerate]
    yn = {}
    for r in fit_regions:
        c = status_model.curves[r]
        raw = np.array([v.covariates.region_fractions[r] for v in history.visits])
        y = c.normalize(raw)
        yn[r] = 1.0 - y if c.inverted else y

    fit_xi = len(history.visits) >= 2
    xi, tau = 0.0, 0.0
    for _ in range(300):
        if fit_xi:
            JtJ = np.eye(2) * _EFFECT_PENALTY
            Jte = np.array([-_EFFECT_PENALTY * xi, -_EFFECT_PENALTY * tau])
        else:
            JtJ = np.array([[_EFFECT_PENALTY]])
            Jte = np.array([-_EFFECT_PENALTY * tau])
        for r in fit_regions:
            c = status_model.curves[r]
            warp = math.exp(xi) * (t - c.midpoint - tau)
            q = c.rate * warp
            p = _sigmoid(q)
            e = yn[r] - p
            dp = p * (1.0 - p)
            g_tau = -dp * c.rate * math.exp(xi)
            if fit_xi:
                g_xi = dp * q
                JtJ[0, 0] += g_xi @ g_xi
                JtJ[0, 1] += g_xi @ g_tau
                JtJ[1, 1] += g_tau @ g_tau
                Jte[0] += g_xi @ e
                Jte[1] += g_tau @ e
            else:
                JtJ[0, 0] += g_tau @ g_tau
                Jte[0] += g_tau @ e
        if fit_xi:
            JtJ[1, 0] = JtJ[0, 1]
        step = np.linalg.solve(JtJ + 1e-9 * np.eye(len(Jte)), Jte)
        if fit_xi:
            dxi = float(np.clip(step[0], -0.2, 0.2))
            dtau = float(np.clip(step[1], -2.0, 2.0))
            xi += dxi
            tau += dtau
            moved = max(abs(dxi), abs(dtau))
        else:
            dtau = float(np.clip(step[0], -2.0, 2.0))
            tau += dtau
            moved = abs(dtau)
        if moved < 1e-12:
            break
    return xi, tau


def personalize_and_predict_dcm(
    model: DcmModel, history: SubjectHistory, target_age: float
) -> dict[str, float]:
    """Adjust the status-matched average trajectory to the subject, then evaluate."""
    if not model.by_status:
        raise NumericError("disease-course model has no fitted status groups")
    status = history.status
    if status not in model.by_status:
        raise ValueError(f"no fitted trajectory for cognitive status {status!r}")
    sm = model.by_status[status]
    xi, tau = _personalize(sm, history)

    out: dict[str, float] = {}
    for r in REGIONS:
        c = sm.curves[r]
        if c.degenerate:
            out[r] = float(np.clip(c.constant, 0.0, 1.0))
            continue
        q = c.rate * math.exp(xi) * (target_age - c.midpoint - tau)
        p = float(np.clip(_sigmoid(np.array(q)), 0.0, 1.0))
        if c.inverted:
            p = 1.0 - p
        out[r] = float(np.clip(c.denormalize(np.array(p)), 0.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# Structured-text model files
# ---------------------------------------------------------------------------


def _new_ini() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    return cp


def write_lm_model(model: LmModel, path: str | Path) -> None:
    cp = _new_ini()
    cp["lm"] = {
        "format_version": "1",
        "huber_delta": repr(model.huber_delta),
        "rank_deficient": str(model.rank_deficient),
        "features": ",".join(("intercept",) + LM_FEATURES),
    }
    for r, beta in model.coefficients.items():
        cp[f"lm.coef.{r}"] = {
            name: repr(float(v))
            for name, v in zip(("intercept",) + LM_FEATURES, beta)
        }
    with open(path, "w") as fh:
        cp.write(fh)


def read_lm_model(path: str | Path) -> LmModel:
    cp = _new_ini()
    if not cp.read(path):
        raise FileNotFoundError(path)
    coefficients = {}
    names = ("intercept",) + LM_FEATURES
    for r in REGIONS:
        sec = cp[f"lm.coef.{r}"]
        coefficients[r] = np.array([float(sec[n]) for n in names])
    return LmModel(
        huber_delta=float(cp["lm"]["huber_delta"]),
        coefficients=coefficients,
        rank_deficient=cp["lm"].getboolean("rank_deficient"),
    )


def write_dcm_model(model: DcmModel, path: str | Path) -> None:
    cp = _new_ini()
    cp["dcm"] = {
        "format_version": "1",
        "iterations": str(model.iterations),
        "statuses": ",".join(sorted(model.by_status)),
    }
    for status, sm in model.by_status.items():
        for r, c in sm.curves.items():
            cp[f"dcm.{status}.curve.{r}"] = {
                "rate": repr(c.rate),
                "midpoint": repr(c.midpoint),
                "inverted": str(c.inverted),
                "vmin": repr(c.vmin),
                "vmax": repr(c.vmax),
                "degenerate": str(c.degenerate),
                "constant": repr(c.constant),
            }
        cp[f"dcm.{status}.effects"] = {
            s: f"{repr(xi)},{repr(tau)}" for s, (xi, tau) in sm.subject_effects.items()
        }
    with open(path, "w") as fh:
        cp.write(fh)


def read_dcm_model(path: str | Path) -> DcmModel:
    cp = _new_ini()
    if not cp.read(path):
        raise FileNotFoundError(path)
    by_status = {}
    for status in cp["dcm"]["statuses"].split(","):
        if not status:
            continue
        curves = {}
        for r in REGIONS:
            sec = cp[f"dcm.{status}.curve.{r}"]
            curves[r] = RegionCurve(
                rate=float(sec["rate"]),
                midpoint=float(sec["midpoint"]),
                inverted=sec.getboolean("inverted"),
                vmin=float(sec["vmin"]),
                vmax=float(sec["vmax"]),
                degenerate=sec.getboolean("degenerate"),
                constant=float(sec["constant"]),
            )
        effects = {}
        if cp.has_section(f"dcm.{status}.effects"):
            for s, val in cp[f"dcm.{status}.effects"].items():
                xi, tau = val.split(",")
                effects[s] = (float(xi), float(tau))
        by_status[status] = DcmStatusModel(curves=curves, subject_effects=effects)
    return DcmModel(by_status=by_status, iterations=int(cp["dcm"]["iterations"]))
