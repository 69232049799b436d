#!/usr/bin/env python3
"""
Lasso-Ridge Refitting

Second stage on top of a Lasso fit: a ridge-penalized correction delta
restricted to the equicorrelation set E,

    delta = argmin (1/2n) ||(y - X beta_L) - X delta||^2 + (lambda_R / 2) ||delta||^2,
    delta_{-E} = 0,      beta_R = beta_L + delta.

Provides:
- the closed form (Sigma_{n,E} + lambda_R I) delta_E = lambda_L s via Cholesky
- an independent conjugate-gradient solve of the quadratic itself
- the least-squares refit on E (the lambda_R -> 0 limit)
- the safe lambda_R threshold and the runtime-checkable guarantees
  (residual reduction, sign preservation, the l1/l2 bound, the
  prediction-improvement certificate)
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq
from scipy.sparse.linalg import LinearOperator, cg

from lasso_ridge.core import (
    ConvergenceError,
    DesignMatrix,
    RefitError,
    TrueModel,
    infinity_operator_norm,
    restricted_gram,
)
from lasso_ridge.lasso import LassoFit

logger = logging.getLogger(__name__)

SAFE_MARGIN = 1e-6
SIGN_DEAD_ZONE = 1e-12
RISK_SLACK = 1e-9
CERTIFICATE_SLACK = 1e-9
L1_L2_BOUND_SLACK = 1e-12
DIRECT_SOLVE_GRADIENT_TOL = 1e-10


class RefitMethod(Enum):
    """How the correction was computed"""
    CLOSED_FORM = "closed_form"
    DIRECT_SOLVE = "direct_solve"
    LEAST_SQUARES = "least_squares"


@dataclass
class RefitResult:
    """Correction delta (zero off E) and the refitted estimator beta_R = beta_L + delta"""
    delta: np.ndarray
    beta_r: np.ndarray
    lambda_r: float
    min_safe_lambda_r: float
    safe: bool
    method: RefitMethod
    active_set: np.ndarray


@dataclass
class RiskReduction:
    """Residual comparison between the Lasso and the refitted estimator"""
    holds: bool
    gap: float
    penalized_gap: float


@dataclass
class ImprovementCertificate:
    """Both sides of the pointwise prediction-improvement inequality"""
    lhs_gap: float
    remainder: float
    noise_sup: float
    condition_met: bool
    safe: bool

    @property
    def applicable(self) -> bool:
        return self.safe and self.condition_met

    @property
    def holds(self) -> bool:
        return not self.applicable or self.lhs_gap >= self.remainder - CERTIFICATE_SLACK


def min_safe_lambda_r(X: DesignMatrix, E) -> float:
    """2 ||Sigma_{n,E}||_inf; 0 for an empty set"""
    if len(E) == 0:
        return 0.0
    return 2.0 * infinity_operator_norm(restricted_gram(X, E))


def default_lambda_r(X: DesignMatrix, E) -> float:
    """Smallest safe value with a strict margin; any positive value works for empty E"""
    threshold = min_safe_lambda_r(X, E)
    return threshold * (1.0 + SAFE_MARGIN) if threshold > 0 else 1.0


def _check_lambda_r(lambda_r: float) -> float:
    if not (np.isfinite(lambda_r) and lambda_r > 0):
        raise ValueError(f"lambda_R must be positive and finite, got {lambda_r}")
    return float(lambda_r)


def _result(fit: LassoFit, delta: np.ndarray, lambda_r: float, threshold: float,
            method: RefitMethod) -> RefitResult:
    return RefitResult(
        delta=delta,
        beta_r=fit.beta + delta,
        lambda_r=lambda_r,
        min_safe_lambda_r=threshold,
        safe=lambda_r > threshold,
        method=method,
        active_set=fit.active_set,
    )


def refit_closed_form(X: DesignMatrix, fit: LassoFit, lambda_r: Optional[float] = None) -> RefitResult:
    """
    Solve (Sigma_{n,E} + lambda_R I) delta_E = lambda_L s by Cholesky.

    An unsafe lambda_R is still honored; the result then carries safe=False.
    """
    E = fit.active_set
    lambda_r = _check_lambda_r(default_lambda_r(X, E) if lambda_r is None else lambda_r)
    threshold = min_safe_lambda_r(X, E)
    delta = np.zeros(X.p)
    if E.size:
        system = restricted_gram(X, E) + lambda_r * np.eye(E.size)
        try:
            factor = cho_factor(system, lower=True)
        except (LinAlgError, ValueError) as exc:
            raise RefitError(
                f"Cholesky factorization failed: {exc}",
                diagnostics={
                    "size": int(E.size),
                    "lambda_r": lambda_r,
                    "min_diagonal": float(np.min(np.diag(system))),
                    "finite": bool(np.all(np.isfinite(system))),
                },
            ) from exc
        delta[E] = cho_solve(factor, fit.lambda_l * fit.signs)
    if lambda_r <= threshold:
        logger.debug("refit with unsafe lambda_R", extra={"lambda_r": lambda_r, "threshold": threshold})
    return _result(fit, delta, lambda_r, threshold, RefitMethod.CLOSED_FORM)


def refit_direct_solve(X: DesignMatrix, y, fit: LassoFit, lambda_r: Optional[float] = None,
                       gradient_tolerance: float = DIRECT_SOLVE_GRADIENT_TOL) -> RefitResult:
    """
    Minimize the ridge objective over coordinates in E by conjugate gradients,
    working from the Lasso residual rather than the KKT signs.

    Raises:
        ConvergenceError: when the final gradient norm stays above gradient_tolerance
    """
    E = fit.active_set
    lambda_r = _check_lambda_r(default_lambda_r(X, E) if lambda_r is None else lambda_r)
    threshold = min_safe_lambda_r(X, E)
    delta = np.zeros(X.p)
    if E.size:
        XE = X.values[:, E]
        n = X.n
        residual = np.asarray(y, dtype=float) - X.values @ fit.beta
        rhs = XE.T @ residual / n
        hessian = LinearOperator(
            (E.size, E.size), matvec=lambda v: XE.T @ (XE @ v) / n + lambda_r * v, dtype=float
        )
        solution = np.zeros(E.size)
        gradient_norm = np.inf
        for _ in range(5):
            solution, _info = cg(hessian, rhs, x0=solution, rtol=0.0,
                                 atol=0.1 * gradient_tolerance, maxiter=max(20 * E.size, 1000))
            gradient_norm = float(np.linalg.norm(hessian.matvec(solution) - rhs))
            if gradient_norm <= gradient_tolerance:
                break
        else:
            raise ConvergenceError(
                f"direct ridge solve stopped with gradient norm {gradient_norm:.3e}",
                last_iterate=solution,
                gradient_norm=gradient_norm,
            )
        delta[E] = solution
    return _result(fit, delta, lambda_r, threshold, RefitMethod.DIRECT_SOLVE)


def refit_least_squares(X: DesignMatrix, y, fit: LassoFit) -> RefitResult:
    """Least-squares refit of the Lasso residual on X_E (the lambda_R = 0 limit)"""
    E = fit.active_set
    delta = np.zeros(X.p)
    if E.size:
        residual = np.asarray(y, dtype=float) - X.values @ fit.beta
        delta[E] = lstsq(X.values[:, E], residual)[0]
    threshold = min_safe_lambda_r(X, E)
    result = _result(fit, delta, 0.0, threshold, RefitMethod.LEAST_SQUARES)
    result.safe = False
    return result


def empirical_risk_reduction_check(X: DesignMatrix, y, fit: LassoFit, refit: RefitResult) -> RiskReduction:
    """
    ||y - X beta_R|| <= ||y - X beta_L|| (to 1e-9), plus the penalized form
    (1/2n)||y - X beta_R||^2 + (lambda_R/2)||delta||^2 <= (1/2n)||y - X beta_L||^2.
    """
    y = np.asarray(y, dtype=float)
    lasso_residual = y - X.values @ fit.beta
    refit_residual = y - X.values @ refit.beta_r
    gap = float(np.linalg.norm(lasso_residual) - np.linalg.norm(refit_residual))
    penalized_gap = float(
        lasso_residual @ lasso_residual / (2 * X.n)
        - refit_residual @ refit_residual / (2 * X.n)
        - refit.lambda_r / 2 * refit.delta @ refit.delta
    )
    return RiskReduction(holds=gap >= -RISK_SLACK, gap=gap, penalized_gap=penalized_gap)


def improvement_certificate(X: DesignMatrix, truth: TrueModel, eps, fit: LassoFit,
                            refit: RefitResult) -> ImprovementCertificate:
    """Evaluate the prediction gap and its guaranteed lower bound for known beta0 and noise"""
    truth.check_design(X)
    signal = X.values @ truth.beta0
    lasso_error = X.values @ fit.beta - signal
    refit_error = X.values @ refit.beta_r - signal
    lhs_gap = float((lasso_error @ lasso_error - refit_error @ refit_error) / (2 * X.n))
    noise_sup = float(np.max(np.abs(X.values.T @ np.asarray(eps, dtype=float) / X.n)))
    lambda_l = fit.lambda_l
    remainder = float(
        refit.lambda_r / (2 * lambda_l) * (lambda_l - 3 * noise_sup) * (refit.delta @ refit.delta)
    )
    return ImprovementCertificate(
        lhs_gap=lhs_gap,
        remainder=remainder,
        noise_sup=noise_sup,
        condition_met=lambda_l >= 3 * noise_sup,
        safe=refit.safe,
    )


def _dead_zone_sign(values: np.ndarray) -> np.ndarray:
    return np.where(np.abs(values) < SIGN_DEAD_ZONE, 0.0, np.sign(values))


def sign_preservation_check(fit: LassoFit, refit: RefitResult) -> bool:
    """sign(beta_R) = sign(beta_L) on E and sign(delta_E) = s"""
    E = refit.active_set
    if E.size == 0:
        return True
    if not refit.safe:
        logger.info("sign check on an unsafe lambda_R is informational only",
                    extra={"lambda_r": refit.lambda_r, "threshold": refit.min_safe_lambda_r})
    same_as_lasso = np.array_equal(_dead_zone_sign(refit.beta_r[E]), _dead_zone_sign(fit.beta[E]))
    follows_signs = np.array_equal(_dead_zone_sign(refit.delta[E]), fit.signs)
    return bool(same_as_lasso and follows_signs)


def l1_l2_bound_check(fit: LassoFit, refit: RefitResult) -> Tuple[bool, float]:
    """lambda_L ||delta||_1 / 3 <= lambda_R ||delta||_2^2 / 2; returns (holds, rhs - lhs)"""
    lhs = fit.lambda_l * float(np.abs(refit.delta).sum()) / 3.0
    rhs = refit.lambda_r * float(refit.delta @ refit.delta) / 2.0
    return lhs <= rhs + L1_L2_BOUND_SLACK, rhs - lhs
