#!/usr/bin/env python3
"""
Experiment Engine for Lasso vs. Lasso-Ridge

Runs the comparison protocols end to end:
- synthetic scenarios with AR(1) Gaussian designs and unit sparse signals,
  both estimators tuned by K-fold cross-validation, replicated and averaged
- the semi-synthetic protocol on a fixed design read from CSV (or a
  labeled Gaussian stand-in) with three sparse signal cases
- the real-data protocol with repeated train/test splits
- runtime checks of the refit guarantees on random instances, the
  pointwise improvement certificate, its high-probability frequency and
  the weak prediction-consistency rate

Every replication draws from its own seeded stream, so results do not
depend on the number of worker threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lasso_ridge.core import (
    DataError,
    DesignMatrix,
    InvariantViolation,
    LassoRidgeError,
    Rng,
    TrueModel,
    gaussian_vector,
    infinity_operator_norm,
    normalize_columns,
    restricted_gram,
    spectral_norm,
)
from lasso_ridge.lasso import LassoFit, LassoSettings, fit_lasso
from lasso_ridge.logging_config import PerformanceTimer, log_replication_event
from lasso_ridge.refit import (
    RefitResult,
    default_lambda_r,
    empirical_risk_reduction_check,
    improvement_certificate,
    l1_l2_bound_check,
    refit_closed_form,
    refit_direct_solve,
    sign_preservation_check,
)
from lasso_ridge.tuning import (
    DEFAULT_FOLDS,
    DEFAULT_LAMBDA_L_COUNT,
    DEFAULT_LAMBDA_R_COUNT,
    Estimator,
    Grid,
    cross_validate,
    cross_validate_pair,
    lambda_l_grid,
    lambda_r_grid,
    nonconverged_fits,
    theoretical_lambda_l,
)

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20250101
STANDIN_SHAPE = (38, 3051)
AGREEMENT_TOL = 1e-8
KKT_CERTIFICATE_TOL = 1e-7
UNSAFE_FACTORS = (0.5, 1e-1, 1e-2, 1e-3)
MIN_SIGNAL_CASE_P = 20


class BetaScheme(Enum):
    """How the true coefficient vector of a synthetic scenario is built"""
    UNIT_FIRST_S = "unit_first_s"
    CUSTOM = "custom"


class BetaCase(Enum):
    """Sparse signal cases for the fixed-design protocol"""
    CASE1 = "case1"
    CASE2 = "case2"
    CASE3 = "case3"


class PredictionMode(Enum):
    """In-sample signal error or error on a fresh design from the same distribution"""
    IN_SAMPLE = "in_sample"
    OUT_OF_SAMPLE = "out_of_sample"


@dataclass
class ScenarioConfig:
    """One cell of the simulation grid"""
    n: int
    p: int
    s_true: int
    rho: float = 0.0
    sigma: float = 1.0
    replications: int = 100
    folds: int = DEFAULT_FOLDS
    seed: int = DEFAULT_SEED
    beta_scheme: BetaScheme = BetaScheme.UNIT_FIRST_S
    custom_beta: Optional[Sequence[float]] = None
    prediction: PredictionMode = PredictionMode.IN_SAMPLE
    test_size: Optional[int] = None
    lambda_l_count: int = DEFAULT_LAMBDA_L_COUNT
    lambda_r_count: int = DEFAULT_LAMBDA_R_COUNT
    threads: int = 1
    debug: bool = False
    shared_folds: bool = True

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError(f"n and p must be positive, got n={self.n}, p={self.p}")
        if not 0 <= self.s_true <= self.p:
            raise ValueError(f"s_true must lie in [0, p], got {self.s_true}")
        if not -1 < self.rho < 1:
            raise ValueError(f"rho must satisfy |rho| < 1, got {self.rho}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.replications < 1:
            raise ValueError(f"replications must be at least 1, got {self.replications}")
        self.beta_scheme = BetaScheme(self.beta_scheme)
        self.prediction = PredictionMode(self.prediction)

    @property
    def cell(self) -> Dict[str, Any]:
        return {"protocol": "synthetic", "n": self.n, "p": self.p, "s_true": self.s_true, "rho": self.rho, "sigma": self.sigma}

    @property
    def label(self) -> str:
        return f"n={self.n},p={self.p},s={self.s_true},sigma={self.sigma:g},rho={self.rho:g}"

    def beta0(self) -> np.ndarray:
        return true_beta(self.beta_scheme, self.p, self.s_true, self.custom_beta)


@dataclass
class SemiSyntheticSpec:
    """Fixed-design protocol: design from file (or a stand-in), signal case, noise, splits"""
    design_path: Optional[str] = None
    beta_case: BetaCase = BetaCase.CASE1
    noise_sd: float = 1.0
    train_fraction: float = 0.7
    rounds: int = 100
    seed: int = DEFAULT_SEED
    folds: int = DEFAULT_FOLDS
    header: bool = False
    stand_in_shape: Tuple[int, int] = STANDIN_SHAPE
    threads: int = 1
    shared_folds: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train fraction must lie in (0, 1), got {self.train_fraction}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be at least 1, got {self.rounds}")
        self.beta_case = BetaCase(self.beta_case)


@dataclass
class RealDataSpec:
    """Train/test protocol on a response-bearing CSV"""
    path: str
    response: Union[str, int, None] = None
    header: bool = True
    train_fraction: float = 0.7
    rounds: int = 100
    seed: int = DEFAULT_SEED
    folds: int = DEFAULT_FOLDS
    threads: int = 1
    shared_folds: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train fraction must lie in (0, 1), got {self.train_fraction}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be at least 1, got {self.rounds}")


@dataclass
class ReplicationRecord:
    """Errors of both estimators in one replication (or round)"""
    index: int
    pred_mse_lasso: float = math.nan
    pred_mse_new: float = math.nan
    est_mse_lasso: float = math.nan
    est_mse_new: float = math.nan
    lambda_l_lasso: float = math.nan
    lambda_l_new: float = math.nan
    lambda_r_new: float = math.nan
    active_lasso: int = 0
    active_new: int = 0
    nonconverged: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def improvement_pct(mean_lasso: Optional[float], mean_new: Optional[float]) -> Optional[float]:
    """100 (mean_lasso / mean_new - 1); None flags a degenerate denominator"""
    if mean_lasso is None or mean_new is None or not np.isfinite(mean_new) or mean_new == 0.0:
        return None
    return 100.0 * (mean_lasso / mean_new - 1.0)


def _mean_sd(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    finite = [v for v in values if np.isfinite(v)]
    if not finite:
        return None, None
    sd = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
    return float(np.mean(finite)), sd


@dataclass
class ImprovementReport:
    """Aggregated errors of one scenario cell or protocol run"""
    cell: Dict[str, Any]
    metric: str
    records: List[ReplicationRecord] = field(default_factory=list)
    mean_pred_mse_lasso: Optional[float] = None
    mean_pred_mse_new: Optional[float] = None
    mean_est_mse_lasso: Optional[float] = None
    mean_est_mse_new: Optional[float] = None
    sd_pred_mse_lasso: Optional[float] = None
    sd_pred_mse_new: Optional[float] = None
    sd_est_mse_lasso: Optional[float] = None
    sd_est_mse_new: Optional[float] = None
    pred_improvement_pct: Optional[float] = None
    est_improvement_pct: Optional[float] = None
    pred_degenerate: bool = False
    est_degenerate: bool = False
    failures: int = 0
    nonconverged: int = 0

    @classmethod
    def from_records(cls, cell: Dict[str, Any], metric: str,
                     records: List[ReplicationRecord]) -> "ImprovementReport":
        records = sorted(records, key=lambda record: record.index)
        good = [record for record in records if record.ok]
        report = cls(cell=cell, metric=metric, records=records, failures=len(records) - len(good),
                     nonconverged=sum(record.nonconverged for record in good))
        report.mean_pred_mse_lasso, report.sd_pred_mse_lasso = _mean_sd([r.pred_mse_lasso for r in good])
        report.mean_pred_mse_new, report.sd_pred_mse_new = _mean_sd([r.pred_mse_new for r in good])
        report.mean_est_mse_lasso, report.sd_est_mse_lasso = _mean_sd([r.est_mse_lasso for r in good])
        report.mean_est_mse_new, report.sd_est_mse_new = _mean_sd([r.est_mse_new for r in good])
        report.pred_improvement_pct = improvement_pct(report.mean_pred_mse_lasso, report.mean_pred_mse_new)
        report.est_improvement_pct = improvement_pct(report.mean_est_mse_lasso, report.mean_est_mse_new)
        report.pred_degenerate = report.mean_pred_mse_new is not None and report.pred_improvement_pct is None
        report.est_degenerate = report.mean_est_mse_new is not None and report.est_improvement_pct is None
        return report


# ---------------------------------------------------------------- generators

def ar1_raw(rng: Rng, n: int, p: int, rho: float) -> np.ndarray:
    """Rows i.i.d. N(0, Sigma) with Sigma_ij = rho^|i-j|, by the AR(1) recursion across columns"""
    if not -1 < rho < 1:
        raise ValueError(f"rho must satisfy |rho| < 1, got {rho}")
    z = rng.generator.standard_normal((n, p))
    if rho == 0:
        return z
    x = np.empty_like(z)
    x[:, 0] = z[:, 0]
    innovation = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        x[:, j] = rho * x[:, j - 1] + innovation * z[:, j]
    return x


def ar1_design(rng: Rng, n: int, p: int, rho: float) -> DesignMatrix:
    return normalize_columns(ar1_raw(rng, n, p, rho))


def standin_design(rng: Rng, n: int = STANDIN_SHAPE[0], p: int = STANDIN_SHAPE[1]) -> DesignMatrix:
    """Gaussian stand-in for a fixed design that is not available locally"""
    logger.info("using a generated Gaussian stand-in design", extra={"n": n, "p": p})
    return normalize_columns(rng.generator.standard_normal((n, p)))


def true_beta(scheme: BetaScheme, p: int, s_true: int,
              custom: Optional[Sequence[float]] = None) -> np.ndarray:
    """First s_true coefficients equal to one, the rest zero; or a custom vector of length p"""
    if BetaScheme(scheme) is BetaScheme.CUSTOM:
        beta = np.asarray(custom if custom is not None else [], dtype=float)
        if beta.shape != (p,):
            raise ValueError(f"custom beta has length {beta.size}, expected {p}")
        return beta
    if not 0 <= s_true <= p:
        raise ValueError(f"s_true must lie in [0, p], got {s_true}")
    beta = np.zeros(p)
    beta[:s_true] = 1.0
    return beta


def beta_case_semi(case: BetaCase, p: int, rng: Rng) -> np.ndarray:
    """
    case1: entries 1-5 ~ Unif(3,4), 6-10 ~ Unif(1,2)
    case2: 5 / sqrt(j) for j = 1..10
    case3: entries 1-20 ~ Unif(1,2)
    """
    if p < MIN_SIGNAL_CASE_P:
        raise ValueError(f"signal cases need p >= {MIN_SIGNAL_CASE_P}, got {p}")
    beta = np.zeros(p)
    case = BetaCase(case)
    if case is BetaCase.CASE1:
        beta[:5] = rng.generator.uniform(3.0, 4.0, size=5)
        beta[5:10] = rng.generator.uniform(1.0, 2.0, size=5)
    elif case is BetaCase.CASE2:
        beta[:10] = 5.0 / np.sqrt(np.arange(1, 11))
    else:
        beta[:20] = rng.generator.uniform(1.0, 2.0, size=20)
    return beta


# ---------------------------------------------------------------- invariant checks

def check_refit_invariants(X: DesignMatrix, y: np.ndarray, fit: LassoFit, refit: RefitResult,
                           truth: Optional[TrueModel] = None,
                           eps: Optional[np.ndarray] = None) -> List[str]:
    """Names of the violated refit guarantees for one (fit, refit) pair; empty when all hold"""
    violations = []
    if not empirical_risk_reduction_check(X, y, fit, refit).holds:
        violations.append("risk_reduction")
    if refit.safe:
        if not sign_preservation_check(fit, refit):
            violations.append("sign_preservation")
        if not l1_l2_bound_check(fit, refit)[0]:
            violations.append("l1_l2_bound")
    if truth is not None and eps is not None:
        if not improvement_certificate(X, truth, eps, fit, refit).holds:
            violations.append("improvement_certificate")
    if refit.lambda_r > 0 and refit.active_set.size:
        direct = refit_direct_solve(X, y, fit, refit.lambda_r)
        if np.max(np.abs(direct.delta - refit.delta)) > AGREEMENT_TOL:
            violations.append("closed_form_agreement")
    return violations


# ---------------------------------------------------------------- synthetic scenarios

def _has_signal(X: DesignMatrix, y: np.ndarray) -> bool:
    return bool(np.any(X.values.T @ y))


def _select_both(X: DesignMatrix, y: np.ndarray, folds: int, rng: Rng,
                 lambda_l_count: int = DEFAULT_LAMBDA_L_COUNT,
                 lambda_r_count: int = DEFAULT_LAMBDA_R_COUNT,
                 shared_folds: bool = True):
    """
    CV-selected coefficients for both estimators; a response with no signal
    gives zero models. With shared_folds off each search draws its own folds.
    """
    if not _has_signal(X, y):
        return np.zeros(X.p), np.zeros(X.p), None, None
    grid = Grid(lambda_l_grid(X, y, lambda_l_count), lambda_r_grid(X.n, lambda_r_count))
    if shared_folds:
        lasso_cv, ridge_cv = cross_validate_pair(X, y, grid, folds, rng)
    else:
        lasso_cv = cross_validate(X, y, grid, folds, rng.child(0), Estimator.LASSO_ONLY)
        ridge_cv = cross_validate(X, y, grid, folds, rng.child(1), Estimator.LASSO_RIDGE)
    return lasso_cv.coefficients, ridge_cv.coefficients, lasso_cv, ridge_cv


def _fill_selection(record: ReplicationRecord, lasso_cv, ridge_cv) -> None:
    if lasso_cv is None or ridge_cv is None:
        return
    record.lambda_l_lasso = lasso_cv.best_lambda_l
    record.active_lasso = int(lasso_cv.fit.active_set.size)
    record.lambda_l_new = ridge_cv.best_lambda_l
    record.lambda_r_new = ridge_cv.best_lambda_r
    record.active_new = int(ridge_cv.fit.active_set.size)
    record.nonconverged = nonconverged_fits(lasso_cv, ridge_cv)


def run_replication(cfg: ScenarioConfig, index: int) -> ReplicationRecord:
    """Fresh design, noise and response; CV both estimators; record their errors"""
    rng = Rng(cfg.seed, stream=index)
    X = ar1_design(rng.child(0), cfg.n, cfg.p, cfg.rho)
    truth = TrueModel(cfg.beta0(), cfg.sigma)
    eps = gaussian_vector(rng.child(1), cfg.n, cfg.sigma)
    y = X.values @ truth.beta0 + eps

    beta_lasso, beta_new, lasso_cv, ridge_cv = _select_both(
        X, y, cfg.folds, rng.child(2), cfg.lambda_l_count, cfg.lambda_r_count, cfg.shared_folds
    )
    if cfg.debug and ridge_cv is not None:
        violations = check_refit_invariants(X, y, ridge_cv.fit, ridge_cv.refit, truth, eps)
        if violations:
            raise InvariantViolation(f"replication {index} of {cfg.label}: {', '.join(violations)}")

    if cfg.prediction is PredictionMode.OUT_OF_SAMPLE:
        X_eval = ar1_design(rng.child(3), cfg.test_size or cfg.n, cfg.p, cfg.rho)
    else:
        X_eval = X
    record = ReplicationRecord(
        index=index,
        pred_mse_lasso=float(np.mean((X_eval.values @ (beta_lasso - truth.beta0)) ** 2)),
        pred_mse_new=float(np.mean((X_eval.values @ (beta_new - truth.beta0)) ** 2)),
        est_mse_lasso=float(np.sum((beta_lasso - truth.beta0) ** 2)),
        est_mse_new=float(np.sum((beta_new - truth.beta0) ** 2)),
    )
    _fill_selection(record, lasso_cv, ridge_cv)
    return record


def _run_indexed(worker, count: int, threads: int, label: str) -> List[ReplicationRecord]:
    def guarded(index: int) -> ReplicationRecord:
        try:
            record = worker(index)
        except InvariantViolation:
            raise
        except LassoRidgeError as exc:
            log_replication_event(logger, index, label, f"replication failed: {exc}", level="ERROR")
            return ReplicationRecord(index=index, error=str(exc))
        if record.nonconverged:
            log_replication_event(logger, index, label, "replication used non-converged fits",
                                  level="WARNING", nonconverged=record.nonconverged)
        log_replication_event(logger, index, label, "replication done", level="DEBUG",
                              pred_mse_lasso=record.pred_mse_lasso, pred_mse_new=record.pred_mse_new)
        return record

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(guarded, range(count)))
    return [guarded(index) for index in range(count)]


def run_scenario(cfg: ScenarioConfig) -> ImprovementReport:
    """Replicate one scenario cell and aggregate into an ImprovementReport"""
    metric = f"{cfg.prediction.value}_prediction"
    with PerformanceTimer(logger, "scenario", cell=cfg.label, replications=cfg.replications):
        records = _run_indexed(lambda index: run_replication(cfg, index),
                               cfg.replications, cfg.threads, cfg.label)
    report = ImprovementReport.from_records(cfg.cell, metric, records)
    if report.pred_degenerate:
        logger.warning("degenerate improvement denominator", extra={"cell": cfg.label})
    return report


def run_grid(configs: Sequence[ScenarioConfig]) -> List[ImprovementReport]:
    return [run_scenario(cfg) for cfg in configs]


# ---------------------------------------------------------------- fixed-design protocols

def load_table(path: Union[str, Path], header: bool) -> pd.DataFrame:
    """Read a numeric CSV, rejecting missing or non-numeric cells with their position"""
    try:
        frame = pd.read_csv(path, header=0 if header else None)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if frame.empty:
        raise DataError(f"no data rows in {path}")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(numeric.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        column = str(frame.columns[col])
        raise DataError(
            f"missing or non-numeric value at row {row + 1}, column {column!r} of {path}",
            row=int(row), column=column,
        )
    return numeric.astype(float)


def _split(rng: Rng, n: int, train_fraction: float, folds: int) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.generator.permutation(n)
    n_train = min(max(int(round(train_fraction * n)), folds), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def run_semi_synthetic(spec: SemiSyntheticSpec) -> ImprovementReport:
    """
    Fixed design, beta0 drawn once from the signal case, then per round a new
    noise vector, a new 70/30 split and new CV on the training rows. The
    prediction fields of the report hold test-set MSE.
    """
    if spec.design_path:
        X = normalize_columns(load_table(spec.design_path, spec.header).to_numpy())
        source = str(spec.design_path)
    else:
        X = standin_design(Rng(spec.seed, stream=0).child(1), *spec.stand_in_shape)
        source = f"stand-in {X.n}x{X.p}"
    if X.n < 10:
        raise DataError(f"fixed design needs at least 10 rows, got {X.n}")
    if X.p < MIN_SIGNAL_CASE_P:
        raise DataError(f"fixed design needs at least {MIN_SIGNAL_CASE_P} columns for the signal cases, got {X.p}")
    beta0 = beta_case_semi(spec.beta_case, X.p, Rng(spec.seed, stream=0).child(0))
    signal = X.values @ beta0
    label = f"semi-synthetic {spec.beta_case.value} on {source}"

    def one_round(index: int) -> ReplicationRecord:
        rng = Rng(spec.seed, stream=index + 1)
        y = signal + gaussian_vector(rng.child(0), X.n, spec.noise_sd)
        train, test = _split(rng.child(1), X.n, spec.train_fraction, spec.folds)
        X_train = X.rows(train)
        beta_lasso, beta_new, lasso_cv, ridge_cv = _select_both(
            X_train, y[train], spec.folds, rng.child(2), shared_folds=spec.shared_folds
        )
        X_test = X.values[test]
        record = ReplicationRecord(
            index=index,
            pred_mse_lasso=float(np.mean((y[test] - X_test @ beta_lasso) ** 2)),
            pred_mse_new=float(np.mean((y[test] - X_test @ beta_new) ** 2)),
            est_mse_lasso=float(np.sum((beta_lasso - beta0) ** 2)),
            est_mse_new=float(np.sum((beta_new - beta0) ** 2)),
        )
        _fill_selection(record, lasso_cv, ridge_cv)
        return record

    with PerformanceTimer(logger, "semi_synthetic", cell=label, rounds=spec.rounds):
        records = _run_indexed(one_round, spec.rounds, spec.threads, label)
    cell = {"protocol": "semi_synthetic", "case": spec.beta_case.value, "source": source,
            "n": X.n, "p": X.p, "sigma": spec.noise_sd}
    return ImprovementReport.from_records(cell, "test_mse", records)


def response_column(frame: pd.DataFrame, response: Union[str, int, None]) -> str:
    if response is None:
        return frame.columns[-1]
    if response in frame.columns:
        return response
    try:
        return frame.columns[int(response)]
    except (ValueError, IndexError) as exc:
        raise DataError(f"response column {response!r} not found", column=str(response)) from exc


def run_real_data(spec: RealDataSpec) -> ImprovementReport:
    """
    Repeated train/test splits on a CSV. Each round centers the design and
    response on training means and scales columns by training norms; test
    rows get the same transform and predictions add the training mean back.
    """
    frame = load_table(spec.path, spec.header)
    response = response_column(frame, spec.response)
    y_all = frame[response].to_numpy(dtype=float)
    X_all = frame.drop(columns=[response]).to_numpy(dtype=float)
    if X_all.shape[0] < 10 or X_all.shape[1] < 1:
        raise DataError(f"need at least 10 rows and one predictor, got shape {X_all.shape}")
    label = f"real data {spec.path}"

    def one_round(index: int) -> ReplicationRecord:
        rng = Rng(spec.seed, stream=index)
        train, test = _split(rng.child(0), X_all.shape[0], spec.train_fraction, spec.folds)
        centers = X_all[train].mean(axis=0)
        centered = X_all[train] - centers
        norms = np.linalg.norm(centered, axis=0)
        keep = norms > 0
        if not keep.all():
            logger.warning("dropping constant training columns",
                           extra={"columns": np.flatnonzero(~keep).tolist(), "round": index})
        if not keep.any():
            raise DataError("every predictor is constant on the training rows")
        scale = math.sqrt(train.size) / norms[keep]
        X_train = DesignMatrix(centered[:, keep] * scale, normalized=True)
        y_center = float(y_all[train].mean())
        y_train = y_all[train] - y_center
        if np.ptp(y_all[train]) == 0:
            y_train = np.zeros(train.size)
        beta_lasso, beta_new, lasso_cv, ridge_cv = _select_both(
            X_train, y_train, spec.folds, rng.child(1), shared_folds=spec.shared_folds
        )
        X_test = (X_all[test] - centers)[:, keep] * scale
        record = ReplicationRecord(
            index=index,
            pred_mse_lasso=float(np.mean((y_all[test] - y_center - X_test @ beta_lasso) ** 2)),
            pred_mse_new=float(np.mean((y_all[test] - y_center - X_test @ beta_new) ** 2)),
        )
        _fill_selection(record, lasso_cv, ridge_cv)
        return record

    with PerformanceTimer(logger, "real_data", cell=label, rounds=spec.rounds):
        records = _run_indexed(one_round, spec.rounds, spec.threads, label)
    cell = {"protocol": "real_data", "source": str(spec.path), "response": str(response),
            "n": X_all.shape[0], "p": X_all.shape[1]}
    return ImprovementReport.from_records(cell, "test_mse", records)


# ---------------------------------------------------------------- theory checks

@dataclass
class FrequencyReport:
    """How often the refit beat the Lasso in prediction at the theoretical lambda_L"""
    alpha: float
    lambda_l: float
    replications: int
    events: int

    @property
    def frequency(self) -> float:
        return self.events / self.replications


def _theory_instance(cfg: ScenarioConfig, rng: Rng, lambda_l: float,
                     settings: Optional[LassoSettings] = None):
    X = ar1_design(rng.child(0), cfg.n, cfg.p, cfg.rho)
    truth = TrueModel(cfg.beta0(), cfg.sigma)
    eps = gaussian_vector(rng.child(1), cfg.n, cfg.sigma)
    y = X.values @ truth.beta0 + eps
    fit = fit_lasso(X, y, lambda_l, settings)
    refit = refit_closed_form(X, fit, default_lambda_r(X, fit.active_set))
    return X, y, truth, eps, fit, refit


def certificate_frequency(cfg: ScenarioConfig, alpha: float = 0.1,
                          replications: Optional[int] = None) -> FrequencyReport:
    """Frequency of ||X beta0 - X beta_R|| <= ||X beta0 - X beta_L|| with theoretical lambda_L and safe lambda_R"""
    replications = replications or cfg.replications
    lambda_l = theoretical_lambda_l(cfg.sigma, cfg.n, cfg.p, alpha)
    events = 0
    for index in range(replications):
        X, _, truth, _, fit, refit = _theory_instance(cfg, Rng(cfg.seed, stream=index), lambda_l)
        signal = X.values @ truth.beta0
        lasso_gap = np.linalg.norm(signal - X.values @ fit.beta)
        refit_gap = np.linalg.norm(signal - X.values @ refit.beta_r)
        events += int(refit_gap <= lasso_gap)
    report = FrequencyReport(alpha=alpha, lambda_l=lambda_l, replications=replications, events=events)
    logger.info("certificate frequency", extra={"frequency": report.frequency, "alpha": alpha})
    return report


def _random_instance_shape(rng: Rng) -> Dict[str, Any]:
    g = rng.generator
    n = int(g.integers(20, 101))
    p = int(g.integers(10, 401))
    return {
        "n": n,
        "p": p,
        "rho": float(g.choice([0.0, 0.5, 0.9])),
        "sigma": float(g.choice([0.1, 1.0])),
        "s_true": int(g.integers(1, min(10, p) + 1)),
    }


def certificate_batch(count: int, seed: int = DEFAULT_SEED, inflation: float = 1.2):
    """
    Pointwise improvement certificates with lambda_L = inflation * 3 ||X^T eps / n||_inf,
    which makes the noise condition hold by construction.
    """
    certificates = []
    for index in range(count):
        rng = Rng(seed, stream=index)
        shape = _random_instance_shape(rng.child(9))
        cfg = ScenarioConfig(replications=1, seed=seed, **shape)
        X = ar1_design(rng.child(0), cfg.n, cfg.p, cfg.rho)
        truth = TrueModel(cfg.beta0(), cfg.sigma)
        eps = gaussian_vector(rng.child(1), cfg.n, cfg.sigma)
        y = X.values @ truth.beta0 + eps
        lambda_l = inflation * 3.0 * float(np.max(np.abs(X.values.T @ eps / X.n)))
        fit = fit_lasso(X, y, lambda_l)
        refit = refit_closed_form(X, fit, default_lambda_r(X, fit.active_set))
        certificates.append(improvement_certificate(X, truth, eps, fit, refit))
    return certificates


@dataclass
class InstanceAudit:
    """Violated guarantees and informational notes for one (X, y, lambda_L)"""
    fit: LassoFit
    refit: RefitResult
    violations: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def audit_instance(X: DesignMatrix, y: np.ndarray, lambda_l: float,
                   truth: Optional[TrueModel] = None, eps: Optional[np.ndarray] = None,
                   unsafe_factors: Sequence[float] = UNSAFE_FACTORS) -> InstanceAudit:
    """
    Check: Lasso convergence and KKT certificate, residual reduction, sign
    preservation, the l1/l2 bound, the improvement certificate (with truth and
    noise), closed-form/direct agreement, monotone shrinkage of the correction
    as lambda_R grows, and the norm domination of the restricted Gram matrix.

    Sign flips at lambda_R = factor * the safe threshold are searched for and
    recorded as notes, never as violations.
    """
    fit = fit_lasso(X, y, lambda_l)
    refit = refit_closed_form(X, fit, default_lambda_r(X, fit.active_set))
    audit = InstanceAudit(fit=fit, refit=refit)
    if not fit.converged:
        audit.violations.append("lasso_convergence")
    if fit.kkt_slack > KKT_CERTIFICATE_TOL:
        audit.violations.append("lasso_kkt")
    if fit.support_mismatch:
        audit.notes.append("numeric support differs from the equicorrelation set")

    audit.violations.extend(check_refit_invariants(X, y, fit, refit, truth, eps))

    norms = [np.linalg.norm(refit_closed_form(X, fit, refit.lambda_r * 10.0 ** k).delta) for k in range(6)]
    if any(later > earlier * (1 + 1e-12) for earlier, later in zip(norms, norms[1:])):
        audit.violations.append("monotone_shrinkage")

    gram = restricted_gram(X, fit.active_set)
    if gram.size and spectral_norm(gram) > infinity_operator_norm(gram) + 1e-12:
        audit.violations.append("norm_domination")

    if fit.active_set.size:
        for factor in unsafe_factors:
            unsafe = refit_closed_form(X, fit, factor * refit.min_safe_lambda_r)
            if not sign_preservation_check(fit, unsafe):
                audit.notes.append(f"sign flip at {factor:g} x the safe lambda_R (allowed)")
                break
    return audit


@dataclass
class InvariantOutcome:
    """One random instance checked against the Lasso certificate and the refit guarantees"""
    seed: int
    stream: int
    n: int
    p: int
    rho: float
    sigma: float
    s_true: int
    lambda_l: float
    lambda_r: float
    active_set: List[int] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def invariant_instance(seed: int, stream: int) -> InvariantOutcome:
    """Draw a random instance from (seed, stream) and audit it at a lambda_L from its grid"""
    rng = Rng(seed, stream=stream)
    shape = _random_instance_shape(rng.child(9))
    cfg = ScenarioConfig(replications=1, seed=seed, **shape)
    X = ar1_design(rng.child(0), cfg.n, cfg.p, cfg.rho)
    truth = TrueModel(cfg.beta0(), cfg.sigma)
    eps = gaussian_vector(rng.child(1), cfg.n, cfg.sigma)
    y = X.values @ truth.beta0 + eps
    grid = lambda_l_grid(X, y)
    lambda_l = float(grid[int(rng.child(2).generator.integers(0, grid.size))])

    audit = audit_instance(X, y, lambda_l, truth, eps)
    return InvariantOutcome(seed=seed, stream=stream, lambda_l=lambda_l, lambda_r=audit.refit.lambda_r,
                            active_set=audit.fit.active_set.tolist(), violations=audit.violations,
                            notes=audit.notes, **shape)


# ---------------------------------------------------------------- consistency

@dataclass
class ConsistencyPoint:
    """Mean in-sample prediction error at one sample size, against sigma ||beta0||_1 sqrt(log p / n)"""
    n: int
    mean_pred_mse_lasso: float
    mean_pred_mse_new: float
    rate: float

    @property
    def ratio_new(self) -> float:
        return self.mean_pred_mse_new / self.rate


def consistency_curve(ns: Sequence[int], p: int, s_true: int, sigma: float, rho: float = 0.0,
                      replications: int = 20, seed: int = DEFAULT_SEED,
                      alpha: float = 0.1) -> List[ConsistencyPoint]:
    """Prediction error of both estimators at the theoretical lambda_L for growing n"""
    points = []
    for n in ns:
        cfg = ScenarioConfig(n=n, p=p, s_true=s_true, sigma=sigma, rho=rho,
                             replications=replications, seed=seed)
        lambda_l = theoretical_lambda_l(sigma, n, p, alpha)
        lasso_errors, new_errors = [], []
        for index in range(replications):
            X, _, truth, _, fit, refit = _theory_instance(cfg, Rng(seed, stream=index), lambda_l)
            signal = X.values @ truth.beta0
            lasso_errors.append(np.mean((X.values @ fit.beta - signal) ** 2))
            new_errors.append(np.mean((X.values @ refit.beta_r - signal) ** 2))
        rate = sigma * float(np.abs(cfg.beta0()).sum()) * math.sqrt(math.log(p) / n)
        points.append(ConsistencyPoint(n=n, mean_pred_mse_lasso=float(np.mean(lasso_errors)),
                                       mean_pred_mse_new=float(np.mean(new_errors)), rate=rate))
    return points
