#!/usr/bin/env python3
"""
Lasso Solver with KKT Certificates

Cyclic coordinate descent for
    (1/2n) ||y - X beta||^2 + lambda ||beta||_1
with warm starts, an active-set inner loop and a dual stopping rule
(coordinate change AND KKT slack). Every fit carries the equicorrelation
set E, its signs s and the measured KKT violation so the refit step can
consume them directly.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from lasso_ridge.core import DesignError, DesignMatrix, InvariantViolation

logger = logging.getLogger(__name__)

ROUNDOFF_FACTOR = 1e3


@dataclass
class LassoSettings:
    """Solver tolerances and caps"""
    max_iterations: int = 100000
    coordinate_tolerance: float = 1e-10
    kkt_tolerance: float = 1e-7
    active_set_tolerance: float = 1e-9
    max_active_passes: int = 1000
    debug_checks: bool = False

    def __post_init__(self):
        for name in ("coordinate_tolerance", "kkt_tolerance", "active_set_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iterations < 1 or self.max_active_passes < 1:
            raise ValueError("max_iterations and max_active_passes must be at least 1")


@dataclass
class LassoFit:
    """Lasso solution plus its optimality certificate"""
    beta: np.ndarray
    lambda_l: float
    active_set: np.ndarray
    signs: np.ndarray
    residual: np.ndarray
    kkt_slack: float
    iterations: int
    converged: bool
    kkt_tolerance: float = 1e-7
    objective: float = 0.0
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    support_mismatch: bool = False

    @property
    def is_null(self) -> bool:
        return not np.any(self.beta)


def soft_threshold(z, t: float):
    """sign(z) * max(|z| - t, 0); scalars stay scalars"""
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")
    if np.ndim(z) == 0:
        magnitude = abs(z) - t
        return math.copysign(magnitude, z) if magnitude > 0 else 0.0
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_objective(X: DesignMatrix, y: np.ndarray, beta: np.ndarray, lambda_l: float) -> float:
    residual = y - X.values @ beta
    return float(residual @ residual / (2 * X.n) + lambda_l * np.abs(beta).sum())


def kkt_slack(X: DesignMatrix, y: np.ndarray, beta: np.ndarray, lambda_l: float,
              residual: Optional[np.ndarray] = None) -> float:
    """
    Largest violation of the Lasso KKT conditions:
    X_j^T r / n = lambda sign(beta_j) where beta_j != 0, |X_j^T r / n| <= lambda elsewhere.
    """
    if residual is None:
        residual = y - X.values @ beta
    correlation = X.values.T @ residual / X.n
    nonzero = beta != 0
    worst = 0.0
    if nonzero.any():
        worst = float(np.max(np.abs(correlation[nonzero] - lambda_l * np.sign(beta[nonzero]))))
    if (~nonzero).any():
        worst = max(worst, float(np.max(np.abs(correlation[~nonzero]) - lambda_l)))
    return max(worst, 0.0)


def _validate_problem(X: DesignMatrix, y: np.ndarray, lambda_l: float) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != X.n:
        raise DesignError(f"response has shape {y.shape}, expected ({X.n},)")
    if not np.all(np.isfinite(y)):
        raise DesignError("response contains non-finite values")
    if not (np.isfinite(lambda_l) and lambda_l > 0):
        raise ValueError(f"lambda must be positive and finite, got {lambda_l}")
    return y


@njit(cache=True, nogil=True)
def _sweep(values, col_sq, beta, residual, lambda_l, coords):
    """One coordinate-descent pass over `coords`; returns the largest coefficient change"""
    n = values.shape[0]
    max_delta = 0.0
    for j in coords:
        c = col_sq[j]
        if c == 0.0:
            continue
        z = 0.0
        for i in range(n):
            z += values[i, j] * residual[i]
        z = z / n + c * beta[j]
        if z > lambda_l:
            new = (z - lambda_l) / c
        elif z < -lambda_l:
            new = (z + lambda_l) / c
        else:
            new = 0.0
        step = new - beta[j]
        if step != 0.0:
            for i in range(n):
                residual[i] -= step * values[i, j]
            beta[j] = new
            if abs(step) > max_delta:
                max_delta = abs(step)
    return max_delta


def _equicorrelation_from(X: DesignMatrix, beta: np.ndarray, residual: np.ndarray,
                          lambda_l: float, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
    # the null fit selects nothing, even at lambda = ||X^T y||_inf / n exactly
    if not np.any(beta):
        return np.zeros(0, dtype=int), np.zeros(0)
    correlation = X.values.T @ residual / X.n
    E = np.flatnonzero(np.abs(np.abs(correlation) - lambda_l) <= tolerance)
    return E, np.sign(correlation[E])


def _null_fit(X: DesignMatrix, y: np.ndarray, lambda_l: float, settings: LassoSettings) -> LassoFit:
    """beta = 0 is optimal once lambda >= ||X^T y||_inf / n"""
    return LassoFit(
        beta=np.zeros(X.p),
        lambda_l=float(lambda_l),
        active_set=np.zeros(0, dtype=int),
        signs=np.zeros(0),
        residual=y.copy(),
        kkt_slack=0.0,
        iterations=0,
        converged=True,
        kkt_tolerance=settings.kkt_tolerance,
        objective=float(y @ y / (2 * X.n)),
    )


def _roundoff_floor(lambda_max: float) -> float:
    """Smallest KKT slack double precision can certify for a response of this scale"""
    return ROUNDOFF_FACTOR * np.finfo(float).eps * lambda_max


def fit_lasso(X: DesignMatrix, y, lambda_l: float, settings: Optional[LassoSettings] = None,
              beta_init: Optional[np.ndarray] = None) -> LassoFit:
    """
    Coordinate-descent Lasso fit.

    The sweep tolerance is relative to max(1, max |beta_j|) and the KKT
    tolerance never drops below the rounding floor of the response scale,
    so responses in large units still converge.

    Args:
        X: design, normalized or a row subset of a normalized design (CV folds)
        y: response of length n
        lambda_l: penalty level, strictly positive
        settings: solver tolerances
        beta_init: warm start

    Returns:
        LassoFit; converged is False when max_iterations ran out before both
        the sweep tolerance and the KKT tolerance were met.
    """
    settings = settings or LassoSettings()
    y = _validate_problem(X, y, lambda_l)
    n = X.n
    values = np.asfortranarray(X.values, dtype=float)
    col_sq = np.einsum("ij,ij->j", values, values) / n
    beta = np.zeros(X.p) if beta_init is None else np.array(beta_init, dtype=float)
    if beta.shape != (X.p,):
        raise DesignError(f"warm start has shape {beta.shape}, expected ({X.p},)")
    lambda_max = float(np.max(np.abs(values.T @ y))) / n
    if lambda_l >= lambda_max:
        return _null_fit(X, y, lambda_l, settings)
    kkt_tolerance = max(settings.kkt_tolerance, _roundoff_floor(lambda_max))
    residual = y - values @ beta
    all_coords = np.arange(X.p)

    iterations = 0
    converged = False
    slack = math.inf
    previous = lasso_objective(X, y, beta, lambda_l) if settings.debug_checks else None

    def checked_sweep(coords) -> float:
        nonlocal previous
        delta = _sweep(values, col_sq, beta, residual, lambda_l, coords)
        if settings.debug_checks:
            current = lasso_objective(X, y, beta, lambda_l)
            if current > previous + 1e-12 * max(1.0, abs(previous)):
                raise InvariantViolation(
                    f"objective increased across a sweep: {previous!r} -> {current!r}"
                )
            previous = current
        return delta

    def settled(delta: float) -> bool:
        return delta <= settings.coordinate_tolerance * max(1.0, float(np.max(np.abs(beta))))

    while iterations < settings.max_iterations:
        delta = checked_sweep(all_coords)
        iterations += 1
        if settled(delta):
            residual[:] = y - values @ beta
            slack = kkt_slack(X, y, beta, lambda_l, residual)
            if slack <= kkt_tolerance:
                converged = True
                break
            continue
        # active-set passes, always handing back to a full sweep
        for _ in range(settings.max_active_passes):
            if iterations >= settings.max_iterations:
                break
            delta = checked_sweep(np.flatnonzero(beta))
            iterations += 1
            if settled(delta):
                break

    residual = y - values @ beta
    slack = kkt_slack(X, y, beta, lambda_l, residual)
    if not converged:
        logger.warning(
            "Lasso did not converge",
            extra={"lambda_l": lambda_l, "iterations": iterations, "kkt_slack": slack},
        )

    E, signs = _equicorrelation_from(X, beta, residual, lambda_l, kkt_tolerance)
    support = np.flatnonzero(np.abs(beta) > settings.active_set_tolerance)
    mismatch = not np.array_equal(support, E)
    if mismatch:
        logger.debug(
            "numeric support differs from the equicorrelation set",
            extra={"support": support.tolist(), "equicorrelation": E.tolist()},
        )

    return LassoFit(
        beta=beta,
        lambda_l=float(lambda_l),
        active_set=E,
        signs=signs,
        residual=residual,
        kkt_slack=slack,
        iterations=iterations,
        converged=converged,
        kkt_tolerance=kkt_tolerance,
        objective=float(residual @ residual / (2 * n) + lambda_l * np.abs(beta).sum()),
        support=support,
        support_mismatch=mismatch,
    )


def equicorrelation(fit: LassoFit, X: DesignMatrix, y) -> Tuple[np.ndarray, np.ndarray]:
    """
    Recompute E = { j : | |X_j^T r| / n - lambda | <= kkt tolerance } and s = sign(X_E^T r)
    from the residual of `fit`. Boundary coordinates with a zero coefficient are included.
    """
    residual = np.asarray(y, dtype=float) - X.values @ fit.beta
    return _equicorrelation_from(X, fit.beta, residual, fit.lambda_l, fit.kkt_tolerance)


def lasso_path(X: DesignMatrix, y, lambdas: Sequence[float],
               settings: Optional[LassoSettings] = None) -> List[LassoFit]:
    """Warm-started fits along a strictly decreasing grid"""
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise ValueError("lambda grid must be a nonempty sequence")
    if np.any(lambdas <= 0) or np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambda grid must be positive and strictly decreasing")
    fits: List[LassoFit] = []
    beta = None
    for lam in lambdas:
        fit = fit_lasso(X, y, float(lam), settings, beta_init=beta)
        fits.append(fit)
        beta = fit.beta
    return fits
