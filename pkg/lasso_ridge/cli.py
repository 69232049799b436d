#!/usr/bin/env python3
"""
lasso-ridge command line

One click group with subcommands for fitting, refitting, tuning, the three
comparison protocols, the invariant suite and the consistency curve.
Settings come from lasso_ridge/config/defaults.conf, then --config FILE,
then explicit flags. Reports go to stdout or --output as CSV or text tables.

Exit codes: 0 success, 1 invariant or solver failure, 2 usage, 3 I/O.
"""

import functools
import json
import logging
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import click
import numpy as np
import pandas as pd
import psutil
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from lasso_ridge.core import DataError, DesignError, LassoRidgeError, Rng, normalize_columns
from lasso_ridge.lasso import fit_lasso
from lasso_ridge.logging_config import PerformanceTimer, configure_cli_logging, log_experiment_event
from lasso_ridge.refit import (
    default_lambda_r,
    refit_closed_form,
    refit_direct_solve,
    refit_least_squares,
)
from lasso_ridge.simulate import (
    DEFAULT_SEED,
    ImprovementReport,
    RealDataSpec,
    ScenarioConfig,
    SemiSyntheticSpec,
    consistency_curve,
    invariant_instance,
    load_table,
    response_column,
    run_grid,
    run_real_data,
    run_semi_synthetic,
)
from lasso_ridge.tuning import Grid, cross_validate_pair, lambda_l_grid, lambda_r_grid

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3

DEFAULTS_FILE = Path(__file__).parent / "config" / "defaults.conf"
BUILTIN_DEFAULTS = {
    "seed": str(DEFAULT_SEED),
    "folds": "5",
    "reps": "100",
    "rounds": "100",
    "train_fraction": "0.7",
    "format": "csv",
}

REPORT_COLUMNS = [
    "protocol", "metric", "source", "case", "response",
    "n", "p", "s_true", "sigma", "rho", "replications", "failures", "nonconverged",
    "mean_pred_mse_lasso", "mean_pred_mse_new", "sd_pred_mse_lasso", "sd_pred_mse_new",
    "pred_improvement_pct", "pred_degenerate",
    "mean_est_mse_lasso", "mean_est_mse_new", "sd_est_mse_lasso", "sd_est_mse_new",
    "est_improvement_pct", "est_degenerate",
]

Command = Literal[
    "fit", "refit", "cv", "simulate", "semi-synthetic", "real-data", "check-invariants", "consistency"
]


class RunConfig(BaseModel):
    """Validated settings of one command invocation"""
    model_config = ConfigDict(extra="forbid")

    command: Command
    data: Optional[Path] = None
    design: Optional[Path] = None
    response: Optional[str] = None
    header: bool = True
    output: Optional[Path] = None
    format: Literal["csv", "text"] = "csv"
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2 ** 64)
    verbosity: NonNegativeInt = 0
    threads: PositiveInt = 1

    n: List[PositiveInt] = Field(default_factory=lambda: [100])
    p: List[PositiveInt] = Field(default_factory=lambda: [200])
    s: List[NonNegativeInt] = Field(default_factory=lambda: [5])
    sigma: List[NonNegativeFloat] = Field(default_factory=lambda: [0.5])
    rho: float = 0.0
    reps: PositiveInt = 100
    folds: int = Field(5, ge=2)
    prediction: Literal["in_sample", "out_of_sample"] = "in_sample"
    test_size: Optional[PositiveInt] = None
    debug: bool = False
    shared_folds: bool = True

    lambda_l: Optional[PositiveFloat] = None
    lambda_r: Optional[PositiveFloat] = None
    method: Literal["closed_form", "direct_solve", "least_squares"] = "closed_form"

    case: Literal[1, 2, 3] = 1
    noise_sd: NonNegativeFloat = 1.0
    rounds: PositiveInt = 100
    train_fraction: float = 0.7

    count: PositiveInt = 500
    alpha: float = 0.1

    @field_validator("prediction", "method", mode="before")
    @classmethod
    def _underscored(cls, value):
        return value.replace("-", "_") if isinstance(value, str) else value

    @field_validator("rho")
    @classmethod
    def _rho_in_range(cls, value: float) -> float:
        if not -1 < value < 1:
            raise ValueError(f"rho must satisfy |rho| < 1, got {value}")
        return value

    @field_validator("train_fraction", "alpha")
    @classmethod
    def _open_unit_interval(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError(f"must lie in (0, 1), got {value}")
        return value

    @model_validator(mode="after")
    def _required_per_command(self) -> "RunConfig":
        if self.command in ("fit", "refit", "cv", "real-data") and self.data is None:
            raise ValueError(f"--data is required for {self.command}")
        if self.command in ("fit", "refit") and self.lambda_l is None:
            raise ValueError(f"--lambda-l is required for {self.command}")
        if self.command in ("simulate", "consistency"):
            for s_true, p in product(self.s, self.p):
                if s_true > p:
                    raise ValueError(f"--s {s_true} exceeds --p {p}")
        if self.command == "consistency" and min(self.sigma) <= 0:
            raise ValueError("consistency needs --sigma > 0")
        return self

    def scenario_configs(self) -> List[ScenarioConfig]:
        """Cells ordered by (s, sigma), then n, then p"""
        return [
            ScenarioConfig(
                n=n, p=p, s_true=s_true, rho=self.rho, sigma=sigma,
                replications=self.reps, folds=self.folds, seed=self.seed,
                prediction=self.prediction, test_size=self.test_size,
                threads=self.threads, debug=self.debug, shared_folds=self.shared_folds,
            )
            for s_true, sigma in product(self.s, self.sigma)
            for n in self.n
            for p in self.p
        ]


def _describe(exc: ValidationError) -> str:
    error = exc.errors()[0]
    message = error["msg"]
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    if error["loc"]:
        flag = str(error["loc"][0]).replace("_", "-")
        return f"Invalid value for '--{flag}': {message}"
    return message


# ---------------------------------------------------------------- configuration

def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Flat `key = value` lines; blank lines and `#` comments ignored"""
    values = {}
    with open(path, "r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise click.UsageError(f"{path}:{number}: expected 'key = value', got {line!r}")
            values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, str]:
    """Built-in defaults, overlaid by defaults.conf, overlaid by the user file"""
    values = dict(BUILTIN_DEFAULTS)
    try:
        values.update(read_config_file(DEFAULTS_FILE))
    except OSError as exc:
        logger.debug("using built-in defaults", extra={"reason": str(exc)})
    if path is not None:
        values.update(read_config_file(path))
    return values


def _command_defaults(command: click.Command, values: Dict[str, str]) -> Dict[str, Any]:
    defaults = {}
    for param in command.params:
        if param.name not in values:
            continue
        value = values[param.name]
        if getattr(param, "multiple", False):
            value = [item.strip() for item in value.split(",") if item.strip()]
        defaults[param.name] = value
    return defaults


def _available_cores() -> int:
    return psutil.cpu_count(logical=True) or 1


# ---------------------------------------------------------------- output

def _write_text(text: str, path: Optional[Path]) -> None:
    if path is None:
        click.echo(text, nl=False)
        return
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)
    logger.info("wrote output", extra={"path": str(path)})


def _frame_text(frame: pd.DataFrame, fmt: str) -> str:
    if fmt == "csv":
        return frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    return frame.to_string(index=False, float_format=lambda v: f"{v:.6g}", na_rep="n/a") + "\n"


def _report_rows(reports: Sequence[ImprovementReport]) -> List[Dict[str, Any]]:
    rows = []
    for report in reports:
        if not report.records:
            continue
        row = dict(report.cell)
        row.update({column: getattr(report, column) for column in REPORT_COLUMNS if hasattr(report, column)})
        row["replications"] = len(report.records)
        rows.append(row)
    return rows


def _improvement_tables(frame: pd.DataFrame) -> str:
    blocks = []
    frame = frame.assign(pred_improvement_pct=pd.to_numeric(frame["pred_improvement_pct"]),
                         est_improvement_pct=pd.to_numeric(frame["est_improvement_pct"]))
    for (s_true, sigma, rho), group in frame.groupby(["s_true", "sigma", "rho"], sort=True):
        for title, column in (("prediction improvement %", "pred_improvement_pct"),
                              ("estimation improvement %", "est_improvement_pct")):
            table = group.pivot_table(index="n", columns="p", values=column,
                                      aggfunc="first", dropna=False)
            body = table.to_string(float_format=lambda v: f"{v:.1f}", na_rep="n/a")
            blocks.append(f"s = {s_true:g}, sigma = {sigma:g}, rho = {rho:g}: {title}\n{body}\n")
    return "\n".join(blocks)


def emit_report(reports: Sequence[ImprovementReport], fmt: str = "csv", path: Optional[Path] = None) -> None:
    """
    Write reports as CSV (one row per cell, REPORT_COLUMNS) or text tables
    (rows n, columns p, one block per (s, sigma)). Output bytes depend only
    on the reports.

    Raises:
        OSError: when `path` cannot be written
    """
    frame = pd.DataFrame(_report_rows(reports), columns=REPORT_COLUMNS)
    if fmt == "text" and not frame.empty and (frame["protocol"] == "synthetic").all():
        text = _improvement_tables(frame)
    else:
        text = _frame_text(frame.dropna(axis=1, how="all") if fmt == "text" else frame, fmt)
    _write_text(text, path)


def check_invariants(count: int, seed: int) -> int:
    """
    Run the invariant suite on `count` random instances. Every failing
    instance is printed as one JSON line (seed and stream replay it).

    Returns:
        0 when every check passed, 1 otherwise
    """
    failures = 0
    with PerformanceTimer(logger, "check_invariants", count=count, seed=seed):
        for stream in range(count):
            try:
                outcome = invariant_instance(seed, stream)
            except LassoRidgeError as exc:
                failures += 1
                click.echo(json.dumps({"seed": seed, "stream": stream, "error": str(exc)}, sort_keys=True))
                continue
            for note in outcome.notes:
                logger.info(note, extra={"seed": seed, "stream": stream})
            if not outcome.passed:
                failures += 1
                click.echo(json.dumps(outcome.to_dict(), sort_keys=True))
    click.echo(f"{count - failures}/{count} instances passed", err=True)
    return EXIT_FAILURE if failures else 0


# ---------------------------------------------------------------- click plumbing

@contextmanager
def _exit_codes():
    try:
        yield
    except (DataError, DesignError, OSError) as exc:
        logger.error("input/output failure", extra={"error": str(exc)})
        click.echo(f"Error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except LassoRidgeError as exc:
        logger.error("run failed", extra={"error": str(exc), "error_type": type(exc).__name__})
        click.echo(f"Error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    except ValueError as exc:
        logger.error("invalid setting", extra={"error": str(exc)})
        click.echo(f"Error: {exc}", err=True)
        sys.exit(EXIT_USAGE)


def _build_config(ctx: click.Context, command: str, params: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(command=command, verbosity=ctx.obj.get("verbosity", 0), **params)
    except ValidationError as exc:
        raise click.UsageError(_describe(exc), ctx=ctx) from exc


def _command(name: str):
    """Validate flags into a RunConfig, then run the body under exit-code mapping"""
    def decorator(body):
        @functools.wraps(body)
        @click.pass_context
        def wrapper(ctx, **params):
            config = _build_config(ctx, name, params)
            if ctx.obj.get("parse_only"):
                return config
            with _exit_codes():
                return body(config)
        return wrapper
    return decorator


def _output_options(func):
    func = click.option("--format", "format", type=click.Choice(["csv", "text"]), default="csv",
                        help="Report format")(func)
    func = click.option("--output", type=click.Path(dir_okay=False, path_type=Path),
                        help="Write the report here instead of stdout")(func)
    return func


def _seed_option(func):
    return click.option("--seed", type=int, default=DEFAULT_SEED,
                        help=f"Seed for every random draw (default {DEFAULT_SEED})")(func)


def _threads_option(func):
    return click.option("--threads", type=int, default=_available_cores,
                        help="Worker threads (default: available cores)")(func)


def _fold_sharing_option(func):
    return click.option("--shared-folds/--separate-folds", default=True,
                        help="Both estimators tune on the same CV folds (default) or on their own")(func)


def _data_options(func):
    func = click.option("--header/--no-header", default=True, help="First CSV row holds column names")(func)
    func = click.option("--response", help="Response column name or 0-based index (default: last)")(func)
    func = click.option("--data", type=click.Path(dir_okay=False, path_type=Path),
                        help="CSV with predictors and a response column")(func)
    return func


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG")
@click.option("--log-dir", type=click.Path(file_okay=False, path_type=Path),
              help="Also write structured JSON logs under this directory")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="key = value file overriding the shipped defaults")
@click.pass_context
def cli(ctx, verbose, log_dir, config_path):
    """Lasso and Lasso-Ridge fitting, tuning and benchmark protocols"""
    ctx.ensure_object(dict)
    ctx.obj["verbosity"] = verbose
    values = load_config(config_path)
    ctx.default_map = {name: _command_defaults(command, values) for name, command in cli.commands.items()}
    if not ctx.obj.get("parse_only"):
        run_id = datetime.now(timezone.utc).strftime("run-%Y%m%dT%H%M%S")
        loggers = configure_cli_logging(verbose, log_dir=str(log_dir) if log_dir else None, run_id=run_id)
        log_experiment_event(loggers["lasso_ridge"], "run_start", f"starting {ctx.invoked_subcommand}",
                             command=ctx.invoked_subcommand, config=str(config_path or DEFAULTS_FILE))


def parse_args(argv: Sequence[str]) -> RunConfig:
    """
    Parse and validate a command line without running it.

    Raises:
        click.UsageError: unknown flag, missing value or invalid setting (exit code 2)
    """
    return cli.main(args=list(argv), prog_name="lasso-ridge", standalone_mode=False,
                    obj={"parse_only": True})


def _load_problem(config: RunConfig):
    """Design centered and column-normalized on all rows, response centered"""
    frame = load_table(config.data, config.header)
    response = response_column(frame, config.response)
    y = frame[response].to_numpy(dtype=float)
    predictors = frame.drop(columns=[response])
    raw = predictors.to_numpy(dtype=float)
    try:
        X = normalize_columns(raw - raw.mean(axis=0))
    except DesignError as exc:
        name = predictors.columns[exc.column] if exc.column is not None else None
        raise DataError(f"predictor {name!r} is constant: {exc}", column=str(name)) from exc
    return X, y - y.mean(), [str(name) for name in predictors.columns]


@cli.command()
@_data_options
@click.option("--lambda-l", type=float, help="Lasso penalty")
@_output_options
@_command("fit")
def fit(config: RunConfig):
    """Lasso fit with its equicorrelation set and KKT slack"""
    X, y, names = _load_problem(config)
    result = fit_lasso(X, y, config.lambda_l)
    click.echo(f"converged={result.converged} kkt_slack={result.kkt_slack:.3e} "
               f"|E|={result.active_set.size}", err=True)
    in_e = np.zeros(X.p, dtype=bool)
    in_e[result.active_set] = True
    signs = np.zeros(X.p)
    signs[result.active_set] = result.signs
    frame = pd.DataFrame({"predictor": names, "beta": result.beta,
                          "in_equicorrelation_set": in_e, "sign": signs.astype(int)})
    _write_text(_frame_text(frame, config.format), config.output)


@cli.command()
@_data_options
@click.option("--lambda-l", type=float, help="Lasso penalty")
@click.option("--lambda-r", type=float, help="Ridge penalty (default: smallest safe value)")
@click.option("--method", type=click.Choice(["closed-form", "direct-solve", "least-squares"]),
              default="closed-form", help="How the correction is computed")
@_output_options
@_command("refit")
def refit(config: RunConfig):
    """Lasso fit followed by the ridge correction on its equicorrelation set"""
    X, y, names = _load_problem(config)
    lasso_fit = fit_lasso(X, y, config.lambda_l)
    lambda_r = config.lambda_r or default_lambda_r(X, lasso_fit.active_set)
    if config.method == "least_squares":
        result = refit_least_squares(X, y, lasso_fit)
    elif config.method == "direct_solve":
        result = refit_direct_solve(X, y, lasso_fit, lambda_r)
    else:
        result = refit_closed_form(X, lasso_fit, lambda_r)
    click.echo(f"lambda_r={result.lambda_r:.6g} safe={result.safe} "
               f"min_safe_lambda_r={result.min_safe_lambda_r:.6g}", err=True)
    frame = pd.DataFrame({"predictor": names, "beta_lasso": lasso_fit.beta,
                          "delta": result.delta, "beta_refit": result.beta_r})
    _write_text(_frame_text(frame, config.format), config.output)


@cli.command()
@_data_options
@click.option("--folds", type=int, default=5, help="Cross-validation folds")
@_seed_option
@_threads_option
@_output_options
@_command("cv")
def cv(config: RunConfig):
    """Cross-validated selection for the Lasso and the Lasso-Ridge"""
    X, y, _ = _load_problem(config)
    grid = Grid(lambda_l_grid(X, y), lambda_r_grid(X.n))
    results = cross_validate_pair(X, y, grid, config.folds, Rng(config.seed), threads=config.threads)
    frame = pd.DataFrame([
        {
            "estimator": result.estimator.value,
            "lambda_l": result.best_lambda_l,
            "lambda_r": result.best_lambda_r,
            "cv_error": float(result.cv_error_surface[result.best_index]),
            "active_size": int(result.fit.active_set.size),
            "flagged_fits": len(result.flagged),
        }
        for result in results
    ])
    _write_text(_frame_text(frame, config.format), config.output)


@cli.command()
@click.option("--n", "n", type=int, multiple=True, default=(100,), help="Sample size (repeatable)")
@click.option("--p", "p", type=int, multiple=True, default=(200,), help="Dimension (repeatable)")
@click.option("--s", "s", type=int, multiple=True, default=(5,), help="True sparsity (repeatable)")
@click.option("--sigma", type=float, multiple=True, default=(0.5,), help="Noise level (repeatable)")
@click.option("--rho", type=float, default=0.0, help="AR(1) correlation, |rho| < 1")
@click.option("--reps", type=int, default=100, help="Replications per cell")
@click.option("--folds", type=int, default=5, help="Cross-validation folds")
@click.option("--prediction", type=click.Choice(["in-sample", "out-of-sample"]), default="in-sample",
              help="Prediction error on the training design or on a fresh one")
@click.option("--test-size", type=int, help="Rows of the fresh design (default n)")
@click.option("--debug", is_flag=True, help="Assert the refit guarantees in every replication")
@_fold_sharing_option
@_seed_option
@_threads_option
@_output_options
@_command("simulate")
def simulate(config: RunConfig):
    """Synthetic AR(1) scenarios: Lasso vs. Lasso-Ridge, both tuned by CV"""
    reports = run_grid(config.scenario_configs())
    emit_report(reports, config.format, config.output)


@cli.command("semi-synthetic")
@click.option("--design", type=click.Path(dir_okay=False, path_type=Path),
              help="CSV of the fixed design (default: labeled Gaussian stand-in, 38 x 3051)")
@click.option("--header/--no-header", default=False, help="First CSV row holds column names")
@click.option("--case", type=click.IntRange(1, 3), default=1, help="Signal case")
@click.option("--noise-sd", type=float, default=1.0, help="Noise standard deviation")
@click.option("--rounds", type=int, default=100, help="Noise/split rounds")
@click.option("--train-fraction", type=float, default=0.7, help="Training share of each split")
@click.option("--folds", type=int, default=5, help="Cross-validation folds")
@_fold_sharing_option
@_seed_option
@_threads_option
@_output_options
@_command("semi-synthetic")
def semi_synthetic(config: RunConfig):
    """Fixed design, sparse signal cases, repeated noise draws and 70/30 splits"""
    spec = SemiSyntheticSpec(
        design_path=str(config.design) if config.design else None,
        beta_case=f"case{config.case}", noise_sd=config.noise_sd, train_fraction=config.train_fraction,
        rounds=config.rounds, seed=config.seed, folds=config.folds, header=config.header,
        threads=config.threads, shared_folds=config.shared_folds,
    )
    emit_report([run_semi_synthetic(spec)], config.format, config.output)


@cli.command("real-data")
@_data_options
@click.option("--rounds", type=int, default=100, help="Train/test splits")
@click.option("--train-fraction", type=float, default=0.7, help="Training share of each split")
@click.option("--folds", type=int, default=5, help="Cross-validation folds")
@_fold_sharing_option
@_seed_option
@_threads_option
@_output_options
@_command("real-data")
def real_data(config: RunConfig):
    """Repeated train/test comparison on a CSV with a response column"""
    spec = RealDataSpec(
        path=str(config.data), response=config.response, header=config.header,
        train_fraction=config.train_fraction, rounds=config.rounds, seed=config.seed,
        folds=config.folds, threads=config.threads, shared_folds=config.shared_folds,
    )
    emit_report([run_real_data(spec)], config.format, config.output)


@cli.command("check-invariants")
@click.option("--count", type=int, default=500, help="Random instances to check")
@_seed_option
@_command("check-invariants")
def check_invariants_command(config: RunConfig):
    """Check solver certificates and refit guarantees on random instances"""
    sys.exit(check_invariants(config.count, config.seed))


@cli.command()
@click.option("--n", "n", type=int, multiple=True, default=(50, 100, 200, 400), help="Sample sizes")
@click.option("--p", "p", type=int, multiple=True, default=(100,), help="Dimension")
@click.option("--s", "s", type=int, multiple=True, default=(5,), help="True sparsity")
@click.option("--sigma", type=float, multiple=True, default=(1.0,), help="Noise level")
@click.option("--rho", type=float, default=0.0, help="AR(1) correlation, |rho| < 1")
@click.option("--reps", type=int, default=20, help="Replications per sample size")
@click.option("--alpha", type=float, default=0.1, help="Level of the theoretical lambda_L")
@_seed_option
@_output_options
@_command("consistency")
def consistency(config: RunConfig):
    """Prediction error at the theoretical lambda_L against sigma ||beta0||_1 sqrt(log p / n)"""
    rows = []
    for p, s_true, sigma in product(config.p, config.s, config.sigma):
        for point in consistency_curve(config.n, p, s_true, sigma, config.rho,
                                       config.reps, config.seed, config.alpha):
            rows.append({
                "n": point.n, "p": p, "s_true": s_true, "sigma": sigma, "rho": config.rho,
                "replications": config.reps,
                "mean_pred_mse_lasso": point.mean_pred_mse_lasso,
                "mean_pred_mse_new": point.mean_pred_mse_new,
                "rate": point.rate,
                "ratio_new": point.ratio_new,
            })
    _write_text(_frame_text(pd.DataFrame(rows), config.format), config.output)


def main():
    cli(prog_name="lasso-ridge")


if __name__ == "__main__":
    main()
