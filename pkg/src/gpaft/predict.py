"""Kriging predictions of log-survival time for new subjects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm

from .kernels import KernelStack, assemble_covariance, cross_covariance


@dataclass(frozen=True)
class Prediction:
    mean_log_time: np.ndarray
    var_log_time: np.ndarray

    @property
    def sd_log_time(self):
        return np.sqrt(self.var_log_time)

    @property
    def risk_score(self):
        # larger = higher risk, i.e. shorter predicted survival
        return -self.mean_log_time

    def survival(self, t):
        """Survival probabilities, shape ``(m, len(t))`` (or ``(len(t),)`` for one subject)."""
        return survival_probability(self.mean_log_time, self.var_log_time, t)


def predict_log_time(fit, stack: KernelStack, Z, z_star, x_star, X) -> Prediction:
    """Conditional normal of the log-time of one or more new subjects.

    mean = z*'b + K*' Kt^{-1} (T_bar - Z b)
    var  = sum_s s2_s k_s(x*, x*) + noise2 - K*' Kt^{-1} K*

    ``fit`` is a :class:`~gpaft.mcem.FitResult` (anything with ``params`` and
    ``T_bar``). ``z_star``/``x_star`` may be single rows or matrices; the
    returned arrays are scalars or length-``m`` accordingly.
    """
    p = fit.params
    Z = np.asarray(Z, dtype=float)
    single = np.asarray(z_star).ndim == 1
    z_star = np.atleast_2d(np.asarray(z_star, dtype=float))
    if z_star.shape[1] != Z.shape[1]:
        raise ValueError(f"z_star has {z_star.shape[1]} columns, Z has {Z.shape[1]}")
    cov = assemble_covariance(stack, p.sigma2, p.noise2)
    Ks = np.atleast_2d(cross_covariance(np.atleast_2d(x_star), X, stack, p.sigma2))
    if Ks.shape[0] != z_star.shape[0]:
        raise ValueError("z_star and x_star disagree on the number of subjects")
    resid = np.asarray(fit.T_bar, dtype=float) - Z @ p.beta
    alpha = cov.solve(resid)
    mean = z_star @ p.beta + Ks @ alpha
    V = solve_triangular(cov.factor, Ks.T, lower=True, check_finite=False)
    # normalized RBF kernels have k(x, x) = 1
    var = p.sigma2.sum() + p.noise2 - np.sum(V * V, axis=0)
    var = np.maximum(var, 1e-300)
    if single:
        return Prediction(float(mean[0]), float(var[0]))
    return Prediction(mean, var)


def survival_probability(mean, var, t):
    """``P(T > log t) = 1 - Phi((log t - mean) / sqrt(var))``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("survival times must be positive")
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    if t.ndim:
        mean, sd = mean[..., None], sd[..., None]
    return norm.sf((np.log(t) - mean) / sd)
