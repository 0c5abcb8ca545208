"""Fixed-effects trend fits, report aggregation, and selection scoring."""

import numpy as np
import pytest

from brainprog.analytics import (
    MetricReport,
    MetricRow,
    ProgressionEntry,
    TrendFit,
    fixed_effects_fit,
    select_fast_progressors,
    stratified_report,
    uncertainty_distance_trend,
    uncertainty_error_association,
)
from brainprog.covariates import REGIONS
from brainprog.errors import NumericError


def _row(sid, mse=0.01, ssim=0.9, u=0.1, sex="female", dx="CN", src=70.0, tgt=72.0):
    return MetricRow(
        subject_id=sid,
        source_age=src,
        target_age=tgt,
        mse=mse,
        ssim=ssim,
        mae={r: 0.1 for r in REGIONS},
        u=u,
        sex=sex,
        cognitive_status=dx,
    )


# --- fixed-effects estimator -------------------------------------------------


def _trend_rows(fn, n_subj=8, n_per=4, seed=0):
    """Synthetic (subject, dB, du) rows with per-subject offsets."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_subj):
        offset = rng.uniform(-5, 5)  # absorbed by demeaning
        for _ in range(n_per):
            db = rng.uniform(0.5, 10.0)
            rows.append((f"S{i}", db, fn(db) + offset))
    return rows


def test_quadratic_trend_recovered():
    rows = _trend_rows(lambda db: 0.46 * db**2)
    b1, b2, r2 = uncertainty_distance_trend(rows)
    assert b1 == pytest.approx(0.0, abs=1e-6)
    assert b2 == pytest.approx(0.46, abs=1e-6)
    assert r2 == pytest.approx(1.0, abs=1e-9)


def test_linear_trend_recovered():
    b1, b2, _ = uncertainty_distance_trend(_trend_rows(lambda db: 2.0 * db))
    assert b1 == pytest.approx(2.0, abs=1e-6)
    assert b2 == pytest.approx(0.0, abs=1e-6)


def test_constant_response_gives_zero_coefficients():
    b1, b2, _ = uncertainty_distance_trend(_trend_rows(lambda db: 0.0))
    assert b1 == pytest.approx(0.0, abs=1e-12)
    assert b2 == pytest.approx(0.0, abs=1e-12)


def test_invariant_to_per_subject_constant_shift():
    rows = _trend_rows(lambda db: 0.3 * db + 0.1 * db**2, seed=3)
    base = uncertainty_distance_trend(rows)
    rng = np.random.default_rng(4)
    offsets = {sid: rng.uniform(-100, 100) for sid, _, _ in rows}
    shifted = [(sid, db, du + offsets[sid]) for sid, db, du in rows]
    moved = uncertainty_distance_trend(shifted)
    assert moved[0] == pytest.approx(base[0], abs=1e-8)
    assert moved[1] == pytest.approx(base[1], abs=1e-8)


def test_single_row_subjects_rejected():
    with pytest.raises(ValueError, match="< 2 rows"):
        uncertainty_distance_trend([("A", 1.0, 0.1), ("A", 2.0, 0.2), ("B", 1.0, 0.3)])


def test_degenerate_regressors_raise():
    rows = [("A", 1.0, 0.1), ("A", 1.0, 0.4), ("B", 1.0, 0.2), ("B", 1.0, 0.9)]
    with pytest.raises(NumericError):
        uncertainty_distance_trend(rows)


def test_error_association_constructed_slopes():
    rng = np.random.default_rng(5)
    rows = []
    for i in range(6):
        off_m, off_s = rng.uniform(-1, 1, 2)
        for _ in range(4):
            u = rng.uniform(0.1, 2.0)
            rows.append((f"S{i}", u**2, 0.5 * u**2 + off_m, 1.0 - u**2 + off_s))
    fits = uncertainty_error_association(rows)
    assert fits["mse"].coefficients[0] == pytest.approx(0.5, abs=1e-8)
    assert fits["ssim"].coefficients[0] == pytest.approx(-1.0, abs=1e-8)


def test_error_association_constant_u_flagged_degenerate():
    rows = [("A", 1.0, 0.1, 0.9), ("A", 1.0, 0.2, 0.8), ("B", 1.0, 0.3, 0.7), ("B", 1.0, 0.4, 0.6)]
    fits = uncertainty_error_association(rows)
    assert fits["mse"].degenerate and np.isnan(fits["mse"].coefficients[0])


# --- stratified reports --------------------------------------------------------


def test_single_stratum_equals_global():
    rows = [_row(f"S{i}", mse=0.01 * i) for i in range(1, 6)]
    rep_all = stratified_report(rows, "all")
    rep_dx = stratified_report(rows, "cognitive_status")  # all CN
    assert rep_dx.aggregates()["CN"]["mse"] == rep_all.aggregates()["all"]["mse"]


def test_two_strata_weighted_mean_is_global():
    rows = [_row(f"A{i}", mse=0.02, sex="female") for i in range(3)]
    rows += [_row(f"B{i}", mse=0.08, sex="male") for i in range(2)]
    rep = stratified_report(rows, "sex")
    agg = rep.aggregates()
    w = (3 * agg["female"]["mse"][0] + 2 * agg["male"]["mse"][0]) / 5
    glob = stratified_report(rows, "all").aggregates()["all"]["mse"][0]
    assert glob == pytest.approx(w, abs=1e-15)


def test_random_partition_matches_group_by_oracle():
    rng = np.random.default_rng(6)
    rows = [
        _row(
            f"S{i}",
            mse=float(rng.uniform(0, 1)),
            ssim=float(rng.uniform(0, 1)),
            dx=str(rng.choice(["CN", "MCI", "AD"])),
        )
        for i in range(40)
    ]
    rep = stratified_report(rows, "cognitive_status")
    agg = rep.aggregates()
    for dx in ("CN", "MCI", "AD"):
        vals = [r.mse for r in rows if r.cognitive_status == dx]
        assert agg[dx]["mse"][0] == pytest.approx(np.mean(vals), abs=1e-12)
        assert agg[dx]["mse"][1] == pytest.approx(np.std(vals), abs=1e-12)


def test_unknown_stratum_key_rejected():
    with pytest.raises(ValueError, match="unknown stratum"):
        stratified_report([_row("S0")], "favorite_color")


def test_report_csv_round_trip(tmp_path):
    from brainprog.analytics import read_report_csv

    rows = [_row("S0", u=None), _row("S1", u=0.25)]
    rep = stratified_report(rows)
    rep.to_csv(tmp_path / "r.csv")
    back = read_report_csv(tmp_path / "r.csv")
    assert back.rows[0].u is None
    assert back.rows[1].u == pytest.approx(0.25)
    assert back.rows[1].mse == pytest.approx(rows[1].mse, rel=1e-10)


# --- fast-progressor selection --------------------------------------------------


def _entries(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        v0 = rng.uniform(0.03, 0.05)
        true_drop = rng.uniform(0.0, 0.3)
        out.append(
            ProgressionEntry(
                subject_id=f"S{i:03d}",
                v_source=v0,
                v_predicted=v0 * (1 - true_drop),
                v_true=v0 * (1 - true_drop),
            )
        )
    return out


def test_selection_full_size_and_perfect_predictions():
    entries = _entries(20)
    assert select_fast_progressors(entries, 20).efficacy == 1.0
    assert select_fast_progressors(entries, 5).efficacy == 1.0  # predictions == truth


def test_selection_random_predictions_match_baseline_monte_carlo():
    rng = np.random.default_rng(7)
    n, s, trials = 25, 5, 10_000
    base = _entries(n, seed=8)
    effs = []
    for _ in range(trials):
        shuffled = rng.permutation(n)
        entries = [
            ProgressionEntry(
                subject_id=e.subject_id,
                v_source=e.v_source,
                v_predicted=e.v_source * (1 - rng.uniform(0, 0.3)),
                v_true=e.v_true,
            )
            for e in (base[i] for i in shuffled)
        ]
        effs.append(select_fast_progressors(entries, s).efficacy)
    mean_eff = np.mean(effs)
    se = np.std(effs) / np.sqrt(trials)
    assert abs(mean_eff - s / n) <= 4 * se


def test_selection_invariant_under_monotone_score_transform():
    entries = _entries(15, seed=9)
    base = select_fast_progressors(entries, 4).selected
    # squash predictions monotonically: same relative-reduction ranking
    warped = [
        ProgressionEntry(
            subject_id=e.subject_id,
            v_source=1.0,
            v_predicted=1.0 - ((e.v_source - e.v_predicted) / e.v_source) ** 3,
            v_true=e.v_true,
        )
        for e in entries
    ]
    assert select_fast_progressors(warped, 4).selected == base


def test_selection_excludes_zero_source():
    entries = _entries(6, seed=10)
    entries.append(ProgressionEntry("ZERO", 0.0, 0.0, 0.0))
    res = select_fast_progressors(entries, 3)
    assert res.excluded == ("ZERO",)
    assert res.random_baseline == pytest.approx(3 / 6)
