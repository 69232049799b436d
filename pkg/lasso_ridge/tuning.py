#!/usr/bin/env python3
"""
Tuning-Parameter Selection

- Log-spaced lambda_L grid from 1e-3 ||X^T y||_inf / n up to ||X^T y||_inf / n
- Log-spaced lambda_R grid from 1e-3 n up to n
- The theoretical lambda_L = 3 sigma sqrt(2 log(2p / alpha) / n)
- K-fold cross-validation over the joint (lambda_L, lambda_R) surface, each
  cell being the Lasso at lambda_L followed by the ridge refit at lambda_R
- Ties resolved toward the most regularized model
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from lasso_ridge.core import DesignMatrix, Rng, TuningError
from lasso_ridge.lasso import LassoFit, LassoSettings, lasso_path
from lasso_ridge.refit import RefitResult, refit_closed_form

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_L_COUNT = 20
DEFAULT_LAMBDA_R_COUNT = 10
DEFAULT_FOLDS = 5
GRID_SPAN_DECADES = 3


class Estimator(Enum):
    """Which estimator a cross-validation run selects for"""
    LASSO_ONLY = "lasso_only"
    LASSO_RIDGE = "lasso_ridge"


@dataclass
class Grid:
    """Candidate penalties, each strictly positive and strictly descending"""
    lambda_l_values: np.ndarray
    lambda_r_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.lambda_l_values = np.asarray(self.lambda_l_values, dtype=float)
        self.lambda_r_values = np.asarray(self.lambda_r_values, dtype=float)
        if self.lambda_l_values.size == 0:
            raise TuningError("lambda_L grid is empty")
        for name in ("lambda_l_values", "lambda_r_values"):
            values = getattr(self, name)
            if np.any(~np.isfinite(values)) or np.any(values <= 0):
                raise TuningError(f"{name} must be finite and strictly positive")
            if np.any(np.diff(values) >= 0):
                raise TuningError(f"{name} must be strictly descending without duplicates")


@dataclass
class CvResult:
    """Outcome of one cross-validation search"""
    estimator: Estimator
    best_lambda_l: float
    best_lambda_r: Optional[float]
    cv_error_surface: np.ndarray
    fold_assignment: np.ndarray
    best_index: Tuple[int, int]
    fit: LassoFit
    refit: Optional[RefitResult] = None
    # (fold, lambda_L index) of every non-converged fit; fold None is the full-data fit
    flagged: List[Tuple[Optional[int], int]] = field(default_factory=list)

    @property
    def coefficients(self) -> np.ndarray:
        return self.refit.beta_r if self.refit is not None else self.fit.beta

    @property
    def converged(self) -> bool:
        return not self.flagged


def _log_grid(top: float, count: int) -> np.ndarray:
    if count < 2:
        raise TuningError(f"grid needs at least 2 points, got {count}")
    return top * np.logspace(0.0, -GRID_SPAN_DECADES, count)


def lambda_l_grid(X: DesignMatrix, y, count: int = DEFAULT_LAMBDA_L_COUNT) -> np.ndarray:
    top = float(np.max(np.abs(X.values.T @ np.asarray(y, dtype=float)))) / X.n
    if top == 0.0:
        raise TuningError("response is orthogonal to every column; ||X^T y||_inf = 0")
    return _log_grid(top, count)


def lambda_r_grid(n: int, count: int = DEFAULT_LAMBDA_R_COUNT) -> np.ndarray:
    return _log_grid(float(n), count)


def theoretical_lambda_l(sigma: float, n: int, p: int, alpha: float) -> float:
    """3 sigma sqrt(2 log(2p / alpha) / n)"""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if n < 1 or p < 1:
        raise ValueError(f"n and p must be positive, got n={n}, p={p}")
    return 3.0 * sigma * math.sqrt(2.0 * math.log(2.0 * p / alpha) / n)


def tie_break(indices: Iterable[Sequence[int]]) -> Tuple[int, int]:
    """Among tied cells pick the largest lambda_L, then the largest lambda_R (grids descend)"""
    candidates = [tuple(int(k) for k in index) for index in indices]
    if not candidates:
        raise TuningError("tie_break needs at least one candidate")
    best = min(candidates)
    return best if len(best) == 2 else (best[0], 0)


def make_folds(n: int, folds: int, rng: Rng) -> np.ndarray:
    """Uniformly shuffled partition of range(n) into `folds` groups of near-equal size"""
    if folds < 2:
        raise TuningError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise TuningError(f"cannot split {n} rows into {folds} folds")
    assignment = np.empty(n, dtype=int)
    assignment[rng.generator.permutation(n)] = np.arange(n) % folds
    return assignment


def _fold_errors(X: DesignMatrix, y: np.ndarray, validation: np.ndarray, grid: Grid,
                 settings: Optional[LassoSettings], with_ridge: bool):
    train = ~validation
    X_train = X.rows(train)
    X_val, y_val = X.values[validation], y[validation]
    fits = lasso_path(X_train, y[train], grid.lambda_l_values, settings)

    lasso_errors = np.empty(len(fits))
    ridge_errors = np.empty((len(fits), grid.lambda_r_values.size))
    unconverged = []
    for i, fit in enumerate(fits):
        if not fit.converged:
            unconverged.append(i)
        lasso_errors[i] = np.mean((y_val - X_val @ fit.beta) ** 2)
        if with_ridge:
            for k, lambda_r in enumerate(grid.lambda_r_values):
                refit = refit_closed_form(X_train, fit, float(lambda_r))
                ridge_errors[i, k] = np.mean((y_val - X_val @ refit.beta_r) ** 2)
    return lasso_errors, ridge_errors, unconverged


def _select(surface: np.ndarray) -> Tuple[int, int]:
    minimum = np.nanmin(surface)
    return tie_break(np.argwhere(surface == minimum))


def _cross_validate(X: DesignMatrix, y, grid: Grid, folds: int, rng: Rng,
                    settings: Optional[LassoSettings], with_ridge: bool,
                    threads: int) -> Tuple[CvResult, Optional[CvResult]]:
    y = np.asarray(y, dtype=float)
    if with_ridge and grid.lambda_r_values.size == 0:
        raise TuningError("Lasso-Ridge cross-validation needs a lambda_R grid")
    assignment = make_folds(X.n, folds, rng)

    def run_fold(k: int):
        validation = assignment == k
        if not validation.any():
            raise TuningError(f"fold {k} has no validation rows")
        return _fold_errors(X, y, validation, grid, settings, with_ridge)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_fold = list(pool.map(run_fold, range(folds)))
    else:
        per_fold = [run_fold(k) for k in range(folds)]

    flagged = [(k, i) for k, (_, _, unconverged) in enumerate(per_fold) for i in unconverged]
    if flagged:
        logger.warning("non-converged fits during cross-validation", extra={"flagged": flagged})

    lasso_surface = np.mean([errors for errors, _, _ in per_fold], axis=0)[:, None]
    lasso_index = _select(lasso_surface)
    ridge_surface = np.mean([errors for _, errors, _ in per_fold], axis=0) if with_ridge else None
    ridge_index = _select(ridge_surface) if with_ridge else None

    # full-data refit at the selected penalties, warm-started down the grid
    deepest = max(lasso_index[0], ridge_index[0] if ridge_index else 0)
    full_path = lasso_path(X, y, grid.lambda_l_values[: deepest + 1], settings)

    def with_full_fit(index: int) -> List[Tuple[Optional[int], int]]:
        if full_path[index].converged:
            return list(flagged)
        logger.warning("non-converged full-data fit at the selected lambda_L",
                       extra={"lambda_l": float(grid.lambda_l_values[index])})
        return flagged + [(None, index)]

    lasso_result = CvResult(
        estimator=Estimator.LASSO_ONLY,
        best_lambda_l=float(grid.lambda_l_values[lasso_index[0]]),
        best_lambda_r=None,
        cv_error_surface=lasso_surface,
        fold_assignment=assignment,
        best_index=lasso_index,
        fit=full_path[lasso_index[0]],
        flagged=with_full_fit(lasso_index[0]),
    )
    ridge_result = None
    if with_ridge:
        fit = full_path[ridge_index[0]]
        lambda_r = float(grid.lambda_r_values[ridge_index[1]])
        ridge_result = CvResult(
            estimator=Estimator.LASSO_RIDGE,
            best_lambda_l=float(grid.lambda_l_values[ridge_index[0]]),
            best_lambda_r=lambda_r,
            cv_error_surface=ridge_surface,
            fold_assignment=assignment,
            best_index=ridge_index,
            fit=fit,
            refit=refit_closed_form(X, fit, lambda_r),
            flagged=with_full_fit(ridge_index[0]),
        )
    return lasso_result, ridge_result


def cross_validate(X: DesignMatrix, y, grid: Grid, folds: int = DEFAULT_FOLDS,
                   rng: Optional[Rng] = None, estimator: Estimator = Estimator.LASSO_ONLY,
                   settings: Optional[LassoSettings] = None, threads: int = 1) -> CvResult:
    """
    K-fold cross-validation with validation MSE (1/|fold|) ||y_val - X_val beta||^2.

    The selected model is refit on all rows at the chosen penalties.
    """
    rng = rng or Rng(0)
    with_ridge = Estimator(estimator) is Estimator.LASSO_RIDGE
    lasso_result, ridge_result = _cross_validate(X, y, grid, folds, rng, settings, with_ridge, threads)
    return ridge_result if with_ridge else lasso_result


def cross_validate_pair(X: DesignMatrix, y, grid: Grid, folds: int = DEFAULT_FOLDS,
                        rng: Optional[Rng] = None, settings: Optional[LassoSettings] = None,
                        threads: int = 1) -> Tuple[CvResult, CvResult]:
    """Lasso and Lasso-Ridge selection sharing one fold assignment and one set of fold paths"""
    return _cross_validate(X, y, grid, folds, rng or Rng(0), settings, True, threads)


def nonconverged_fits(lasso: CvResult, ridge: CvResult) -> int:
    """Distinct non-converged fits behind a Lasso / Lasso-Ridge selection"""
    if lasso.fold_assignment is ridge.fold_assignment:
        return len(set(lasso.flagged) | set(ridge.flagged))
    return len(lasso.flagged) + len(ridge.flagged)
