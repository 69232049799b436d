#!/usr/bin/env python3
"""
Numeric Foundations for the Lasso-Ridge Toolkit

Shared building blocks used by every other module:
- DesignMatrix / TrueModel containers with validation
- Column normalization to squared norm n
- Infinity operator norm and power-iteration spectral norm
- Restricted Gram matrices over an index set
- Seeded, splittable random streams
- The exception hierarchy raised by the library
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

NORMALIZATION_RTOL = 1e-8
SYMMETRY_TOL = 1e-10
POWER_ITERATION_RTOL = 1e-10
POWER_ITERATION_MAX_ITER = 10000
POWER_ITERATION_SEED = 20240101


class LassoRidgeError(Exception):
    """Base class for every error raised by the toolkit"""


class DesignError(LassoRidgeError, ValueError):
    """Invalid design matrix or vector input"""

    def __init__(self, message: str, column: Optional[int] = None):
        super().__init__(message)
        self.column = column


class ConvergenceError(LassoRidgeError):
    """An iterative routine stopped before reaching its tolerance"""

    def __init__(self, message: str, last_iterate=None, gradient_norm: Optional[float] = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm


class RefitError(LassoRidgeError):
    """The ridge correction could not be computed"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TuningError(LassoRidgeError, ValueError):
    """Invalid tuning grid or cross-validation request"""


class DataError(LassoRidgeError):
    """Problem reading or interpreting an input file"""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class InvariantViolation(LassoRidgeError, AssertionError):
    """A runtime-checked mathematical guarantee failed"""


@dataclass
class DesignMatrix:
    """Dense n x p predictor matrix; `normalized` means every column has squared norm n"""
    values: np.ndarray
    normalized: bool = False
    n: int = field(init=False)
    p: int = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, order="F")
        if values.ndim != 2:
            raise DesignError(f"design must be two-dimensional, got shape {values.shape}")
        n, p = values.shape
        if n < 1 or p < 1:
            raise DesignError(f"design must have at least one row and one column, got {n}x{p}")
        _require_finite(values, "design")
        values.flags.writeable = False
        self.values = values
        self.n = n
        self.p = p
        if self.normalized:
            sq_norms = np.einsum("ij,ij->j", values, values)
            bad = np.flatnonzero(np.abs(sq_norms - n) > NORMALIZATION_RTOL * n)
            if bad.size:
                j = int(bad[0])
                raise DesignError(
                    f"column {j + 1} has squared norm {sq_norms[j]:.6g}, expected {n}", column=j
                )

    def rows(self, index: np.ndarray) -> "DesignMatrix":
        """Row subset; the result is not assumed normalized"""
        return DesignMatrix(self.values[index, :], normalized=False)

    def columns(self, index: Sequence[int]) -> np.ndarray:
        return self.values[:, list(index)]


@dataclass(frozen=True)
class TrueModel:
    """Ground truth for simulations: y = X beta0 + eps, eps ~ N(0, sigma^2 I)"""
    beta0: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise DesignError(f"sigma must be nonnegative, got {self.sigma}")
        _require_finite(np.asarray(self.beta0, dtype=float), "beta0")

    def check_design(self, X: DesignMatrix) -> None:
        if len(self.beta0) != X.p:
            raise DesignError(f"beta0 has length {len(self.beta0)} but design has p={X.p}")


@dataclass
class Rng:
    """
    Reproducible random stream.

    Identical (seed, stream, spawn_path) always give the same draws; distinct
    streams come from distinct SeedSequence spawn keys and are independent.
    Never share one instance between workers; hand each worker a child().
    """
    seed: int
    stream: int = 0
    spawn_path: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream < 0:
            raise ValueError(f"stream id must be nonnegative, got {self.stream}")
        sequence = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.stream), *self.spawn_path)
        )
        self.generator = np.random.default_rng(sequence)

    def child(self, k: int) -> "Rng":
        return Rng(self.seed, self.stream, self.spawn_path + (int(k),))


def _require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DesignError(f"{what} contains a non-finite entry at position {tuple(int(i) for i in bad)}")


def normalize_columns(X) -> DesignMatrix:
    """
    Scale every column to squared Euclidean norm n.

    Args:
        X: raw n x p matrix (array-like or DesignMatrix)

    Returns:
        DesignMatrix with the normalized flag set

    Raises:
        DesignError: on a zero-norm column (naming it) or a non-finite entry
    """
    raw = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if raw.ndim != 2:
        raise DesignError(f"design must be two-dimensional, got shape {raw.shape}")
    _require_finite(raw, "design")
    n = raw.shape[0]
    norms = np.linalg.norm(raw, axis=0)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        j = int(zero[0])
        raise DesignError(f"column {j + 1} has zero norm and cannot be normalized", column=j)
    return DesignMatrix(raw * (math.sqrt(n) / norms), normalized=True)


def infinity_operator_norm(A) -> float:
    """Maximum absolute row sum"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    _require_finite(A, "matrix")
    return float(np.abs(A).sum(axis=1).max())


def spectral_norm(A) -> float:
    """
    Largest absolute eigenvalue of a symmetric matrix by power iteration.

    The start vector is drawn from a fixed seed so repeated calls agree.
    Stops when the relative change of the estimate drops below 1e-10.

    Raises:
        DesignError: if A is not symmetric within 1e-10
        ConvergenceError: after 10000 iterations, carrying the last estimate
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    _require_finite(A, "matrix")
    if A.shape[0] != A.shape[1] or not np.allclose(A, A.T, rtol=0.0, atol=SYMMETRY_TOL):
        raise DesignError("spectral_norm expects a symmetric matrix")

    x = Rng(POWER_ITERATION_SEED).generator.standard_normal(A.shape[0])
    x /= np.linalg.norm(x)
    estimate = 0.0
    for _ in range(POWER_ITERATION_MAX_ITER):
        y = A @ x
        y_norm = float(np.linalg.norm(y))
        if y_norm == 0.0:
            return 0.0
        if abs(y_norm - estimate) <= POWER_ITERATION_RTOL * y_norm:
            return y_norm
        estimate = y_norm
        x = y / y_norm
    raise ConvergenceError(
        f"power iteration did not converge in {POWER_ITERATION_MAX_ITER} iterations",
        last_iterate=estimate,
    )


def restricted_gram(X: DesignMatrix, E: Sequence[int]) -> np.ndarray:
    """X_E^T X_E / n; the 0 x 0 matrix for an empty index set"""
    index = np.asarray(list(E), dtype=int)
    if index.size and (index.min() < 0 or index.max() >= X.p):
        raise DesignError(f"index set {index.tolist()} out of range for p={X.p}")
    XE = X.values[:, index]
    gram = XE.T @ XE / X.n
    return (gram + gram.T) / 2.0


def gaussian_vector(rng: Rng, length: int, sd: float) -> np.ndarray:
    """i.i.d. N(0, sd^2) draws"""
    if sd < 0:
        raise ValueError(f"standard deviation must be nonnegative, got {sd}")
    if sd == 0:
        return np.zeros(length)
    return rng.generator.normal(0.0, sd, size=length)
