#!/usr/bin/env python3
"""
Tests for the command line: parsing, config files, reports and exit codes
"""

import json

import click
import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from lasso_ridge.cli import REPORT_COLUMNS, check_invariants, cli, emit_report, parse_args
from lasso_ridge.logging_config import configure_cli_logging
from lasso_ridge.simulate import DEFAULT_SEED, ImprovementReport, ReplicationRecord

SMALL_SIMULATION = ["simulate", "--n", "20", "--p", "10", "--s", "2", "--sigma", "0.5",
                    "--reps", "2", "--threads", "1"]


def _report(n=100, p=200):
    records = [ReplicationRecord(index=0, pred_mse_lasso=2.0, pred_mse_new=1.0,
                                 est_mse_lasso=4.0, est_mse_new=2.0)]
    cell = {"protocol": "synthetic", "n": n, "p": p, "s_true": 5, "rho": 0.0, "sigma": 0.5}
    return ImprovementReport.from_records(cell, "in_sample_prediction", records)


def _regression_csv(path, n=40, p=6):
    g = np.random.default_rng(3)
    X = g.standard_normal((n, p))
    frame = pd.DataFrame(X, columns=[f"x{j}" for j in range(p)])
    frame["y"] = 2 * X[:, 0] - X[:, 2] + 0.2 * g.standard_normal(n)
    frame.to_csv(path, index=False)


def test_parse_simulate_flags():
    config = parse_args(["simulate", "--n", "100", "--p", "200", "--s", "5", "--rho", "0",
                         "--sigma", "0.5", "--reps", "20", "--seed", "7"])
    (cell,) = config.scenario_configs()
    assert (cell.n, cell.p, cell.s_true, cell.rho, cell.sigma) == (100, 200, 5, 0.0, 0.5)
    assert (cell.replications, cell.seed) == (20, 7)


def test_seed_defaults_to_documented_constant():
    assert parse_args(["simulate"]).seed == DEFAULT_SEED


def test_invalid_rho_is_a_usage_error():
    with pytest.raises(click.UsageError, match="--rho"):
        parse_args(["simulate", "--rho", "1.5"])
    result = CliRunner().invoke(cli, ["simulate", "--rho", "1.5"])
    assert result.exit_code == 2
    assert "--rho" in result.output


def test_unknown_flag_and_type_mismatch_exit_2():
    runner = CliRunner()
    assert runner.invoke(cli, ["simulate", "--bogus", "1"]).exit_code == 2
    assert runner.invoke(cli, ["simulate", "--reps", "many"]).exit_code == 2
    assert runner.invoke(cli, ["fit", "--lambda-l", "0.1"]).exit_code == 2


def test_config_file_supplies_defaults_and_flags_override(tmp_path):
    config_file = tmp_path / "run.conf"
    config_file.write_text("# scenario\nreps = 7\nseed = 99\nn = 50, 100\nformat = text\n")
    config = parse_args(["--config", str(config_file), "simulate"])
    assert (config.reps, config.seed, config.n, config.format) == (7, 99, [50, 100], "text")
    config = parse_args(["--config", str(config_file), "simulate", "--reps", "3"])
    assert config.reps == 3 and config.seed == 99


def test_malformed_config_file_is_rejected(tmp_path):
    config_file = tmp_path / "bad.conf"
    config_file.write_text("reps 7\n")
    with pytest.raises(click.UsageError, match="key = value"):
        parse_args(["--config", str(config_file), "simulate"])


def test_empty_report_is_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    emit_report([], "csv", path)
    assert path.read_text() == ",".join(REPORT_COLUMNS) + "\n"


def test_one_cell_report_is_one_row_and_deterministic(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_report([_report()], "csv", first)
    emit_report([_report()], "csv", second)
    lines = first.read_text().splitlines()
    assert len(lines) == 2
    assert first.read_bytes() == second.read_bytes()
    row = pd.read_csv(first).iloc[0]
    assert row["pred_improvement_pct"] == pytest.approx(100.0)
    assert row["n"] == 100 and row["p"] == 200


def test_text_report_groups_rows_by_n_and_columns_by_p(tmp_path):
    path = tmp_path / "table.txt"
    emit_report([_report(100, 200), _report(200, 200)], "text", path)
    text = path.read_text()
    assert "s = 5, sigma = 0.5, rho = 0: prediction improvement %" in text
    assert "estimation improvement %" in text
    assert "100.0" in text


def test_simulate_output_is_byte_identical(tmp_path):
    runner = CliRunner()
    outputs = []
    for name in ("first.csv", "second.csv"):
        path = tmp_path / name
        result = runner.invoke(cli, SMALL_SIMULATION + ["--output", str(path)])
        assert result.exit_code == 0, result.output
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1]
    frame = pd.read_csv(tmp_path / "first.csv")
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(frame) == 1


def test_unwritable_output_exits_3(tmp_path):
    target = tmp_path / "missing-dir" / "out.csv"
    result = CliRunner().invoke(cli, SMALL_SIMULATION + ["--output", str(target)])
    assert result.exit_code == 3


def test_missing_input_file_exits_3(tmp_path):
    result = CliRunner().invoke(cli, ["real-data", "--data", str(tmp_path / "none.csv")])
    assert result.exit_code == 3


def test_check_invariants_single_instance():
    result = CliRunner().invoke(cli, ["check-invariants", "--count", "1", "--seed", "5"])
    assert result.exit_code == 0, result.output


def test_check_invariants_prints_nothing_on_success(capsys):
    assert check_invariants(3, seed=5) == 0
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "3/3 instances passed" in captured.err


def test_fit_refit_and_cv_commands(tmp_path):
    data = tmp_path / "data.csv"
    _regression_csv(data)
    runner = CliRunner()

    fit_out = tmp_path / "fit.csv"
    result = runner.invoke(cli, ["fit", "--data", str(data), "--lambda-l", "0.1", "--output", str(fit_out)])
    assert result.exit_code == 0, result.output
    coefficients = pd.read_csv(fit_out)
    assert list(coefficients["predictor"]) == [f"x{j}" for j in range(6)]
    assert coefficients.loc[0, "beta"] > 0 and coefficients.loc[0, "in_equicorrelation_set"]

    refit_out = tmp_path / "refit.csv"
    result = runner.invoke(cli, ["refit", "--data", str(data), "--lambda-l", "0.1",
                                 "--method", "direct-solve", "--output", str(refit_out)])
    assert result.exit_code == 0, result.output
    refit = pd.read_csv(refit_out)
    np.testing.assert_allclose(refit["beta_refit"], refit["beta_lasso"] + refit["delta"])

    cv_out = tmp_path / "cv.csv"
    result = runner.invoke(cli, ["cv", "--data", str(data), "--threads", "1", "--output", str(cv_out)])
    assert result.exit_code == 0, result.output
    selection = pd.read_csv(cv_out)
    assert list(selection["estimator"]) == ["lasso_only", "lasso_ridge"]


def test_real_data_and_consistency_commands(tmp_path):
    data = tmp_path / "data.csv"
    _regression_csv(data)
    runner = CliRunner()
    report = tmp_path / "real.csv"
    result = runner.invoke(cli, ["real-data", "--data", str(data), "--response", "y", "--rounds", "2",
                                 "--threads", "1", "--output", str(report)])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(report).loc[0, "protocol"] == "real_data"

    curve = tmp_path / "curve.csv"
    result = runner.invoke(cli, ["consistency", "--n", "40", "--n", "80", "--p", "30", "--s", "2",
                                 "--reps", "2", "--output", str(curve)])
    assert result.exit_code == 0, result.output
    assert list(pd.read_csv(curve)["n"]) == [40, 80]


def test_run_start_event_carries_run_id(tmp_path):
    result = CliRunner().invoke(cli, ["--log-dir", str(tmp_path), "check-invariants", "--count", "1",
                                      "--seed", "5"])
    assert result.exit_code == 0, result.output
    (log_file,) = tmp_path.glob("run-*/experiment.log")
    events = [json.loads(line) for line in log_file.read_text().splitlines()]
    (start,) = [event for event in events if event.get("event_type") == "run_start"]
    assert start["command"] == "check-invariants"
    assert start["run_id"] == log_file.parent.name


def test_cli_loggers_carry_the_run_id():
    loggers = configure_cli_logging(0, run_id="run-x")
    assert loggers["lasso_ridge"].extra == {"run_id": "run-x"}
    assert set(loggers) == {"lasso_ridge", "root"}


def test_fold_sharing_flag():
    assert parse_args(["simulate"]).shared_folds
    config = parse_args(["simulate", "--separate-folds"])
    assert config.shared_folds is False
    assert all(cell.shared_folds is False for cell in config.scenario_configs())
    assert parse_args(["semi-synthetic", "--separate-folds"]).shared_folds is False
    assert parse_args(["real-data", "--data", "x.csv", "--separate-folds"]).shared_folds is False


def test_narrow_fixed_design_exits_3(tmp_path):
    design = tmp_path / "narrow.csv"
    pd.DataFrame(np.random.default_rng(4).standard_normal((25, 10))).to_csv(design, index=False, header=False)
    result = CliRunner().invoke(cli, ["semi-synthetic", "--design", str(design), "--no-header",
                                      "--rounds", "1", "--threads", "1"])
    assert result.exit_code == 3
    assert "20 columns" in result.output
    assert "Traceback" not in result.output
