"""Least squares, logistic MLE and the analytic consequences of training on a proxy.

Measurement error is defined as ``e = y - u`` (proxy minus truth). Under that
convention the population proxy solution is ``(1 + gamma) beta + alpha``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .models import SemParams

log = logging.getLogger(__name__)

_RANK_RTOL = 1e-10


class RankDeficient(ValueError):
    """Raised when the design matrix is (numerically) collinear."""


class NotConverged(RuntimeError):
    """Raised when Newton iterations fail to reach a stationary point."""

    def __init__(self, message: str, *, gradient_norm: float, iterations: int) -> None:
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class LinearFit:
    coeffs: np.ndarray
    xtx: np.ndarray
    residual_variance: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coeffs


@dataclass(frozen=True, eq=False)
class MeasurementCoeffs:
    alpha_p: np.ndarray
    gamma_p: float


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coeffs: np.ndarray
    converged: bool
    iterations: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(np.asarray(X, dtype=float) @ self.coeffs)


def _as_design(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    return X, y


def ols_fit(X: np.ndarray, y: np.ndarray) -> LinearFit:
    """Least squares through a QR decomposition of ``X``."""

    X, y = _as_design(X, y)
    n, m = X.shape
    if n <= m:
        raise RankDeficient(f"need more rows than columns, got {n} x {m}")
    q, r = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.min() <= _RANK_RTOL * max(diag.max(), 1.0):
        raise RankDeficient("design matrix columns are collinear")
    coeffs = solve_triangular(r, q.T @ y)
    residuals = y - X @ coeffs
    return LinearFit(
        coeffs=coeffs,
        xtx=(X.T @ X) / n,
        residual_variance=float(np.mean(residuals**2)),
    )


def measurement_regression(X: np.ndarray, u: np.ndarray, y: np.ndarray) -> MeasurementCoeffs:
    """Regress the measurement error ``y - u`` on ``[X u]``."""

    X, u = _as_design(X, u)
    y = np.asarray(y, dtype=float)
    fit = ols_fit(np.column_stack([X, u]), y - u)
    return MeasurementCoeffs(alpha_p=fit.coeffs[:-1], gamma_p=float(fit.coeffs[-1]))


def _bias_direction(beta: np.ndarray, mc: MeasurementCoeffs) -> np.ndarray:
    return mc.gamma_p * np.asarray(beta, dtype=float) + mc.alpha_p


def proxy_solution(beta: np.ndarray, mc: MeasurementCoeffs) -> np.ndarray:
    return (1.0 + mc.gamma_p) * np.asarray(beta, dtype=float) + mc.alpha_p


def prediction_error_covariance(
    beta: np.ndarray, mc: MeasurementCoeffs, xtx: np.ndarray
) -> np.ndarray:
    """Covariance between ``u - X w_proxy`` and the columns of ``X``."""

    return -(_bias_direction(beta, mc) @ np.asarray(xtx, dtype=float))


def mse_lower_bound(
    mse_true: float, beta: np.ndarray, mc: MeasurementCoeffs, xtx: np.ndarray
) -> float:
    if mse_true < 0:
        raise ValueError("mse_true must be non-negative")
    v = _bias_direction(beta, mc)
    return float(mse_true + v @ np.asarray(xtx, dtype=float) @ v)


def population_beta(params: SemParams) -> np.ndarray:
    """Population coefficients of ``u`` on ``[1, x]``."""

    return np.array([0.0, params.beta])


def population_measurement(params: SemParams) -> MeasurementCoeffs:
    """Population regression of ``y - u`` on ``[1, x, u]`` under the SEM."""

    return MeasurementCoeffs(alpha_p=np.array([0.0, params.alpha]), gamma_p=params.gamma - 1.0)


def logistic_loglik(coeffs: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ coeffs
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_gradient(coeffs: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return X.T @ (y - expit(X @ coeffs))


def logistic_fit(
    X: np.ndarray,
    y: np.ndarray,
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
    max_halvings: int = 20,
) -> LogisticFit:
    """Newton-Raphson maximum likelihood with step halving.

    Convergence is declared when the Euclidean norm of the score ``X.T (y - p)``
    drops below ``tol * n``, so ``tol`` bounds the average score per row and the
    criterion does not tighten as the sample grows. ``NotConverged`` reports the
    raw score norm.
    """

    X, y = _as_design(X, y)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("logistic labels must be binary")
    n = X.shape[0]
    coeffs = np.zeros(X.shape[1])
    loglik = logistic_loglik(coeffs, X, y)
    grad_norm = np.inf

    for iteration in range(1, max_iter + 1):
        p = expit(X @ coeffs)
        grad = X.T @ (y - p)
        grad_norm = float(np.linalg.norm(grad))
        if np.all(np.abs(y - p) < 1e-6):
            raise NotConverged(
                "labels are perfectly separated; coefficients diverge",
                gradient_norm=grad_norm,
                iterations=iteration,
            )
        if grad_norm < tol * n:
            return LogisticFit(coeffs=coeffs, converged=True, iterations=iteration - 1)

        hessian = X.T @ ((p * (1.0 - p))[:, None] * X)
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError as exc:
            raise NotConverged(
                "singular Hessian", gradient_norm=grad_norm, iterations=iteration
            ) from exc

        scale = 1.0
        for _ in range(max_halvings + 1):
            candidate = coeffs + scale * step
            candidate_loglik = logistic_loglik(candidate, X, y)
            if candidate_loglik >= loglik - 1e-12 * max(1.0, abs(loglik)):
                break
            scale *= 0.5
        else:
            log.debug("Newton step rejected after %d halvings", max_halvings)
            raise NotConverged(
                "log-likelihood did not increase along the Newton direction",
                gradient_norm=grad_norm,
                iterations=iteration,
            )
        coeffs, loglik = candidate, candidate_loglik

    raise NotConverged(
        f"no convergence after {max_iter} iterations (gradient norm {grad_norm:.3g})",
        gradient_norm=grad_norm,
        iterations=max_iter,
    )
