"""Empirical moments, the Gaussian Föllmer drift and the adjoint regression.

All reductions over samples go through ``np.sum`` on explicit elementwise
products rather than BLAS matrix products, so the summation order is fixed by
numpy's pairwise algorithm and results do not depend on BLAS threading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde_core import Ensemble

__all__ = [
    "RegressionError",
    "MomentSchedule",
    "estimate_moments",
    "moment_schedule",
    "regularized_inverse",
    "follmer_drift_gaussian",
    "fit_gain",
]

# Condition number above which the regression normal matrix gets a ridge.
_MAX_COND = 1e12


class RegressionError(np.linalg.LinAlgError):
    pass


def _second_moment(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_i a_i b_i'`` over the leading sample axis (any middle batch axes kept)."""
    return np.sum(a[..., :, None] * b[..., None, :], axis=0)


def estimate_moments(states, step: int | None = None):
    """Mean and 1/N-normalised covariance of an ensemble slice.

    ``states`` is an :class:`Ensemble`, an ``(N, K, n)`` array (then ``step``
    selects the time point) or an ``(N, n)`` array of samples.
    """
    x = states.values if isinstance(states, Ensemble) else np.asarray(states, dtype=float)
    if x.ndim == 3:
        if step is None:
            raise ValueError("step is required for a trajectory ensemble")
        x = x[:, step]
    n_samples = x.shape[0]
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples to estimate moments, got {n_samples}")
    mean = np.sum(x, axis=0) / n_samples
    dev = x - mean
    cov = _second_moment(dev, dev) / n_samples
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def regularized_inverse(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """``(cov + eps I)^{-1}`` with ``eps = 1e-8 * max(tr(cov)/n, 1)``.

    Returns the inverse and the ``eps`` that was used.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    eps = 1e-8 * max(np.trace(cov) / n, 1.0)
    try:
        inv = np.linalg.inv(cov + eps * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"covariance inversion failed after regularisation: {exc}") from exc
    if not np.all(np.isfinite(inv)):
        raise RegressionError("covariance inverse is not finite")
    return 0.5 * (inv + inv.T), eps


@dataclass(frozen=True)
class MomentSchedule:
    """Per-step mean ``(K, n)``, covariance and regularised inverse ``(K, n, n)``."""

    mean: np.ndarray
    cov: np.ndarray
    cov_inv: np.ndarray
    eps: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        n = cov.shape[-1]
        eps = 1e-8 * np.maximum(np.trace(cov, axis1=1, axis2=2) / n, 1.0)
        try:
            inv = np.linalg.inv(cov + eps[:, None, None] * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise RegressionError(f"covariance inversion failed after regularisation: {exc}") from exc
        if not np.all(np.isfinite(inv)):
            raise RegressionError("covariance inverse is not finite")
        return cls(mean, cov, 0.5 * (inv + np.swapaxes(inv, 1, 2)), eps)


def moment_schedule(states) -> MomentSchedule:
    """Moments of every time slice of an ``(N, K, n)`` ensemble, in one pass."""
    x = states.values if isinstance(states, Ensemble) else np.asarray(states, dtype=float)
    n_samples = x.shape[0]
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples to estimate moments, got {n_samples}")
    mean = np.sum(x, axis=0) / n_samples
    dev = x - mean
    cov = _second_moment(dev, dev) / n_samples
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return MomentSchedule.from_moments(mean, cov)


def follmer_drift_gaussian(x, mean, cov_inv, D) -> np.ndarray:
    """Föllmer drift of a Gaussian law, ``D Sigma^{-1} (x - m)`` (batched over ``x``)."""
    return (np.asarray(x) - mean) @ (np.asarray(D) @ np.asarray(cov_inv)).T


def _condition(sym: np.ndarray) -> float:
    lam = np.abs(np.linalg.eigvalsh(sym))
    return np.inf if lam.min() == 0 else lam.max() / lam.min()


def fit_gain(states_at_t, adjoints_at_t, step: int | None = None) -> np.ndarray:
    """Least-squares gain ``argmin_G 1/N sum |y_i - G x_i|^2`` without intercept.

    Solved from the normal equations ``G (sum x x') = sum y x'``. A ridge
    ``eps I`` (same rule as :func:`regularized_inverse`) is added only when the
    second-moment matrix is too ill-conditioned to solve directly.
    """
    x = np.asarray(states_at_t, dtype=float)
    y = np.asarray(adjoints_at_t, dtype=float)
    where = "" if step is None else f" at step {step}"
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"regression inputs must be (N, n) and (N, p), got {x.shape}, {y.shape}")
    n_samples, n = x.shape
    if n_samples < n:
        raise RegressionError(f"need at least {n} samples for the regression{where}, got {n_samples}")
    sxx = _second_moment(x, x) / n_samples
    syx = _second_moment(y, x) / n_samples
    sxx = 0.5 * (sxx + sxx.T)
    if not np.all(np.isfinite(sxx)) or not np.all(np.isfinite(syx)):
        raise RegressionError(f"non-finite regression data{where}")
    if _condition(sxx) > _MAX_COND:
        eps = 1e-8 * max(np.trace(sxx) / n, 1.0)
        sxx = sxx + eps * np.eye(n)
        if _condition(sxx) > _MAX_COND:
            raise RegressionError(f"degenerate state second moment{where}")
    # G sxx = syx  <=>  sxx G' = syx'
    return np.linalg.solve(sxx, syx.T).T
