#!/usr/bin/env python3
"""
Tests for the experiment engine: generators, scenarios, fixed-design and
real-data protocols, and the theory checks
"""

import numpy as np
import pandas as pd
import pytest

from lasso_ridge.core import DataError, Rng, normalize_columns
from lasso_ridge.simulate import (
    BetaCase,
    BetaScheme,
    ImprovementReport,
    PredictionMode,
    RealDataSpec,
    ReplicationRecord,
    ScenarioConfig,
    SemiSyntheticSpec,
    _select_both,
    ar1_design,
    ar1_raw,
    audit_instance,
    beta_case_semi,
    certificate_batch,
    certificate_frequency,
    consistency_curve,
    improvement_pct,
    invariant_instance,
    load_table,
    run_real_data,
    run_scenario,
    run_semi_synthetic,
    standin_design,
    true_beta,
)


def _small_cell(**overrides):
    settings = dict(n=30, p=20, s_true=3, sigma=0.5, rho=0.0, replications=3, seed=17)
    settings.update(overrides)
    return ScenarioConfig(**settings)


def test_ar1_without_correlation_is_standard_normal():
    raw = ar1_raw(Rng(3), 6, 4, 0.0)
    np.testing.assert_array_equal(raw, Rng(3).generator.standard_normal((6, 4)))


def test_ar1_lag_one_correlation():
    raw = ar1_raw(Rng(8), 5000, 3, 0.5)
    for j in range(2):
        assert abs(np.corrcoef(raw[:, j], raw[:, j + 1])[0, 1] - 0.5) < 0.05


def test_ar1_design_is_normalized_and_validated():
    X = ar1_design(Rng(1), 25, 6, 0.9)
    assert X.normalized
    np.testing.assert_allclose((X.values ** 2).sum(axis=0), 25.0)
    with pytest.raises(ValueError):
        ar1_raw(Rng(1), 5, 3, 1.0)


def test_true_beta():
    np.testing.assert_array_equal(true_beta(BetaScheme.UNIT_FIRST_S, 5, 2), [1, 1, 0, 0, 0])
    assert not np.any(true_beta(BetaScheme.UNIT_FIRST_S, 5, 0))
    with pytest.raises(ValueError):
        true_beta(BetaScheme.CUSTOM, 5, 0, custom=[3.0, -1.0])
    np.testing.assert_array_equal(true_beta(BetaScheme.CUSTOM, 2, 0, custom=[3.0, -1.0]), [3.0, -1.0])


def test_signal_cases():
    case2 = beta_case_semi(BetaCase.CASE2, 30, Rng(0))
    assert case2[3] == pytest.approx(2.5)
    assert not np.any(case2[10:])

    case1 = beta_case_semi(BetaCase.CASE1, 30, Rng(0))
    assert np.all((case1[:5] >= 3) & (case1[:5] <= 4))
    assert np.all((case1[5:10] >= 1) & (case1[5:10] <= 2))
    assert not np.any(case1[10:])

    case3 = beta_case_semi("case3", 30, Rng(0))
    assert np.all((case3[:20] >= 1) & (case3[:20] <= 2))
    assert not np.any(case3[20:])

    with pytest.raises(ValueError):
        beta_case_semi(BetaCase.CASE1, 19, Rng(0))


def test_improvement_metric():
    assert improvement_pct(2.0, 1.0) == pytest.approx(100.0)
    assert improvement_pct(0.0, 0.0) is None
    assert improvement_pct(None, 1.0) is None


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        _small_cell(rho=1.5)
    with pytest.raises(ValueError):
        _small_cell(s_true=25)
    assert _small_cell(prediction="out_of_sample").prediction is PredictionMode.OUT_OF_SAMPLE


def test_run_scenario_report():
    report = run_scenario(_small_cell())
    assert len(report.records) == 3 and report.failures == 0
    assert [record.index for record in report.records] == [0, 1, 2]
    assert report.mean_pred_mse_lasso > 0 and report.mean_pred_mse_new > 0
    assert report.pred_improvement_pct == pytest.approx(
        100 * (report.mean_pred_mse_lasso / report.mean_pred_mse_new - 1)
    )
    assert report.cell["protocol"] == "synthetic"
    for record in report.records:
        assert record.lambda_r_new > 0 and record.active_new >= 0


def test_run_scenario_is_deterministic_and_thread_independent():
    first = run_scenario(_small_cell())
    second = run_scenario(_small_cell(threads=3))
    assert first.mean_pred_mse_new == second.mean_pred_mse_new
    assert first.mean_est_mse_lasso == second.mean_est_mse_lasso
    assert [r.lambda_l_lasso for r in first.records] == [r.lambda_l_lasso for r in second.records]


def test_degenerate_scenario_is_flagged():
    report = run_scenario(_small_cell(sigma=0.0, s_true=0, replications=2))
    assert report.mean_pred_mse_new == 0.0
    assert report.pred_improvement_pct is None and report.pred_degenerate
    assert report.est_degenerate


def test_debug_and_out_of_sample_modes():
    report = run_scenario(_small_cell(debug=True, prediction="out_of_sample", test_size=50, replications=2))
    assert report.failures == 0
    assert report.metric == "out_of_sample_prediction"
    assert np.isfinite(report.mean_pred_mse_new)


def test_load_table_reports_missing_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,y\n1,2,3\n4,,6\n")
    with pytest.raises(DataError) as info:
        load_table(path, header=True)
    assert info.value.row == 1 and info.value.column == "b"
    with pytest.raises(DataError):
        load_table(tmp_path / "missing.csv", header=True)


def _write_regression_csv(path, n=40, p=5, constant_response=False, scale=1.0):
    g = np.random.default_rng(12)
    X = g.standard_normal((n, p))
    y = np.full(n, 2.5) if constant_response else X[:, 0] * 2 - X[:, 1] + 0.3 * g.standard_normal(n)
    y = scale * y
    frame = pd.DataFrame(X, columns=[f"x{j}" for j in range(p)])
    frame["target"] = y
    frame.to_csv(path, index=False)


def test_real_data_protocol(tmp_path):
    path = tmp_path / "data.csv"
    _write_regression_csv(path)
    report = run_real_data(RealDataSpec(path=str(path), response="target", rounds=3, seed=5))
    assert report.metric == "test_mse" and report.failures == 0
    assert np.isfinite(report.mean_pred_mse_lasso) and np.isfinite(report.mean_pred_mse_new)
    assert report.mean_est_mse_new is None
    assert report.cell["response"] == "target"


def test_real_data_constant_response(tmp_path):
    path = tmp_path / "flat.csv"
    _write_regression_csv(path, constant_response=True)
    report = run_real_data(RealDataSpec(path=str(path), rounds=2, seed=5))
    assert report.mean_pred_mse_lasso == report.mean_pred_mse_new == pytest.approx(0.0, abs=1e-20)
    for record in report.records:
        assert record.pred_mse_lasso == record.pred_mse_new


def test_real_data_response_in_large_units_converges(tmp_path):
    path = tmp_path / "large.csv"
    _write_regression_csv(path, n=60, p=8, scale=1e8)
    report = run_real_data(RealDataSpec(path=str(path), response="target", rounds=2, seed=5))
    assert report.failures == 0 and report.nonconverged == 0
    assert all(record.nonconverged == 0 for record in report.records)
    assert report.mean_pred_mse_new > 0


def test_semi_synthetic_with_small_stand_in():
    spec = SemiSyntheticSpec(beta_case="case2", rounds=2, seed=3, stand_in_shape=(30, 40))
    report = run_semi_synthetic(spec)
    assert report.cell["source"].startswith("stand-in")
    assert report.failures == 0
    assert np.isfinite(report.mean_pred_mse_new)


def test_semi_synthetic_from_file(tmp_path):
    path = tmp_path / "design.csv"
    pd.DataFrame(np.random.default_rng(1).standard_normal((25, 30))).to_csv(path, index=False, header=False)
    report = run_semi_synthetic(SemiSyntheticSpec(design_path=str(path), rounds=2, seed=4))
    assert report.cell["n"] == 25 and report.cell["p"] == 30
    assert report.failures == 0


def test_semi_synthetic_rejects_narrow_design(tmp_path):
    path = tmp_path / "narrow.csv"
    pd.DataFrame(np.random.default_rng(2).standard_normal((25, 10))).to_csv(path, index=False, header=False)
    with pytest.raises(DataError, match="20 columns"):
        run_semi_synthetic(SemiSyntheticSpec(design_path=str(path), rounds=1, seed=4))


def test_standin_design_shape():
    X = standin_design(Rng(0), 12, 50)
    assert (X.n, X.p) == (12, 50) and X.normalized


def test_certificate_batch_holds():
    certificates = certificate_batch(20, seed=9)
    assert all(certificate.condition_met for certificate in certificates)
    assert all(certificate.remainder >= 0 for certificate in certificates)
    assert all(certificate.lhs_gap >= certificate.remainder - 1e-9 for certificate in certificates)


def test_certificate_frequency_meets_level():
    cfg = ScenarioConfig(n=100, p=100, s_true=5, sigma=1.0, rho=0.0, replications=200, seed=21)
    report = certificate_frequency(cfg, alpha=0.1)
    assert report.replications == 200
    assert report.frequency >= 0.9


def test_invariant_instances_pass():
    for stream in range(5):
        outcome = invariant_instance(seed=31, stream=stream)
        assert outcome.passed, outcome.to_dict()
        assert 20 <= outcome.n <= 100 and 10 <= outcome.p <= 400


def test_consistency_curve_rate_shrinks():
    points = consistency_curve([50, 200], p=50, s_true=3, sigma=1.0, replications=3, seed=2)
    assert [point.n for point in points] == [50, 200]
    assert points[1].rate < points[0].rate
    assert all(np.isfinite(point.ratio_new) for point in points)


@pytest.mark.slow
def test_desk_scale_scenario_grid():
    """(s=5, sigma=0.5), n in {100, 200}, p in {100, 200}, 20 replications each"""
    reports = {}
    for n in (100, 200):
        for p in (100, 200):
            cfg = ScenarioConfig(n=n, p=p, s_true=5, sigma=0.5, rho=0.0, replications=20, seed=7)
            reports[(n, p)] = run_scenario(cfg)
    assert all(report.pred_improvement_pct > 0 for report in reports.values())
    assert reports[(100, 200)].pred_improvement_pct > 50


@pytest.mark.slow
def test_semi_synthetic_direction_on_stand_in():
    report = run_semi_synthetic(SemiSyntheticSpec(beta_case="case1", rounds=25, seed=11))
    if report.mean_pred_mse_new > report.mean_pred_mse_lasso:
        report = run_semi_synthetic(SemiSyntheticSpec(beta_case="case1", rounds=100, seed=11))
    assert report.mean_pred_mse_new <= report.mean_pred_mse_lasso


@pytest.mark.slow
def test_full_invariant_suite():
    failures = [invariant_instance(seed=2025, stream=k) for k in range(500)]
    assert [outcome.to_dict() for outcome in failures if not outcome.passed] == []


def test_separate_folds_draw_one_assignment_per_estimator():
    X = ar1_design(Rng(6), 40, 20, 0.0)
    y = X.values[:, :3].sum(axis=1) + 0.5 * Rng(7).generator.standard_normal(40)
    _, _, lasso_cv, ridge_cv = _select_both(X, y, 5, Rng(3))
    assert lasso_cv.fold_assignment is ridge_cv.fold_assignment
    _, _, lasso_cv, ridge_cv = _select_both(X, y, 5, Rng(3), shared_folds=False)
    assert not np.array_equal(lasso_cv.fold_assignment, ridge_cv.fold_assignment)

    report = run_scenario(_small_cell(replications=2, shared_folds=False))
    assert report.failures == 0 and report.nonconverged == 0
    assert np.isfinite(report.mean_pred_mse_new)


def test_report_sums_nonconverged_fits_of_good_records():
    records = [
        ReplicationRecord(index=0, pred_mse_lasso=1.0, pred_mse_new=1.0, nonconverged=2),
        ReplicationRecord(index=1, pred_mse_lasso=1.0, pred_mse_new=1.0, nonconverged=1),
        ReplicationRecord(index=2, nonconverged=5, error="boom"),
    ]
    report = ImprovementReport.from_records({"protocol": "synthetic"}, "test_mse", records)
    assert report.nonconverged == 3 and report.failures == 1


def _flipping_instance():
    # Gram [[1,.8,.8],[.8,1,.3],[.8,.3,1]] on three rows; noiseless response with beta0 = 1
    gram = np.array([[1.0, 0.8, 0.8], [0.8, 1.0, 0.3], [0.8, 0.3, 1.0]])
    X = normalize_columns(np.sqrt(3.0) * np.linalg.cholesky(gram).T)
    return X, X.values @ np.ones(3)


def test_sign_flip_below_the_safe_lambda_r_is_a_note():
    X, y = _flipping_instance()
    audit = audit_instance(X, y, 0.01)
    assert audit.fit.active_set.tolist() == [0, 1, 2]
    assert audit.refit.min_safe_lambda_r == pytest.approx(5.2)
    assert audit.notes == ["sign flip at 0.01 x the safe lambda_R (allowed)"]
    assert audit.passed, audit.violations


def test_sign_flip_search_stops_at_the_first_flipping_factor():
    X, y = _flipping_instance()
    assert audit_instance(X, y, 0.01, unsafe_factors=(0.5, 0.1)).notes == []
    audit = audit_instance(X, y, 0.01, unsafe_factors=(1e-2, 1e-3))
    assert len(audit.notes) == 1 and "0.01 x" in audit.notes[0]
