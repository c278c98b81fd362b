"""Monte Carlo M-step: maximize the average complete-data Gaussian log-likelihood.

Given ``s`` completed log-time vectors ``T_1..T_s`` the objective is

    mean_j  -1/2 [ n log 2pi + log det K + (T_j - Z b)' K^{-1} (T_j - Z b) ],
    K = sum_s sigma2[s] k_s + noise2 I.

Only the censored coordinates vary across completions, so everything is
expressed through the completion mean ``T_bar`` and the ``n_c x n_c`` central
second moment of the censored block. Averaging quadratic forms over samples
then costs the same as a single evaluation.

:func:`maximize` alternates a GLS update of the fixed effects with
multiplicative minorize-maximize updates of the variance components, plus an
extrapolation step that is kept only when it raises the objective.
:func:`single_kernel_maximize` handles ``M = 1`` in the eigenbasis of the
kernel, where the covariance is diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import eigh, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.special import expit

from .data import Partition
from .errors import CannotFitError
from .kernels import CovarianceAssembly, GramMatrix, KernelStack, assemble_covariance

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelParams:
    beta: np.ndarray
    sigma2: np.ndarray
    noise2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float).ravel())
        object.__setattr__(self, "noise2", float(self.noise2))
        if not self.noise2 > 0:
            raise ValueError("noise2 must be positive")
        if np.any(self.sigma2 < 0):
            raise ValueError("variance components must be nonnegative")

    @property
    def total_variance(self) -> float:
        return float(self.sigma2.sum() + self.noise2)

    def replace(self, **kw) -> "ModelParams":
        d = dict(beta=self.beta, sigma2=self.sigma2, noise2=self.noise2)
        d.update(kw)
        return ModelParams(**d)

    def to_dict(self):
        return {"beta": self.beta.tolist(), "sigma2": self.sigma2.tolist(),
                "noise2": self.noise2}

    @classmethod
    def from_dict(cls, d):
        return cls(beta=d["beta"], sigma2=d["sigma2"], noise2=d["noise2"])


@dataclass(frozen=True)
class MStepState:
    params: ModelParams
    loglik: float
    inner_iters: int
    extrapolation_accepts: int
    converged: bool = True
    trace: tuple = field(default=(), repr=False)


class CompletedData:
    """Monte Carlo completions of the log-time vector.

    Parameters
    ----------
    T_o : (n_o,) array_like
        Observed log-times, in ``partition.observed_idx`` order.
    partition : Partition
    draws : (s, n_c) array_like
        Imputed censored log-times, columns in ``partition.censored_idx`` order.
    """

    def __init__(self, T_o, partition: Partition, draws):
        self.partition = partition
        self.T_o = np.asarray(T_o, dtype=float)
        draws = np.asarray(draws, dtype=float)
        if draws.ndim == 1:
            draws = draws[None, :]
        if draws.shape[1] != partition.n_c or self.T_o.shape[0] != partition.n_o:
            raise ValueError("draws/T_o do not match the partition")
        self.draws = draws

    @classmethod
    def from_complete(cls, T) -> "CompletedData":
        T = np.asarray(T, dtype=float)
        part = Partition(np.array([], dtype=int), np.arange(T.shape[0]))
        return cls(T, part, np.zeros((1, 0)))

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def size(self) -> int:
        return self.draws.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        T = np.empty(self.n)
        T[self.partition.observed_idx] = self.T_o
        T[self.partition.censored_idx] = self.draws.mean(axis=0)
        return T

    @cached_property
    def cov_c(self) -> np.ndarray:
        D = self.draws - self.draws.mean(axis=0)
        return D.T @ D / self.size

    @cached_property
    def cov_factor(self) -> np.ndarray:
        """``F`` (n x r) with the full central second moment equal to ``F F'``."""
        n_c = self.partition.n_c
        F = np.zeros((self.n, 0))
        if n_c == 0 or self.size < 2:
            return F
        w, V = eigh(self.cov_c)
        keep = w > max(w.max(), 0.0) * 1e-13
        if not keep.any():
            return F
        F = np.zeros((self.n, int(keep.sum())))
        F[self.partition.censored_idx] = V[:, keep] * np.sqrt(w[keep])
        return F

    def matrix(self) -> np.ndarray:
        """All completed vectors, shape ``(s, n)``."""
        T = np.empty((self.size, self.n))
        T[:, self.partition.observed_idx] = self.T_o
        T[:, self.partition.censored_idx] = self.draws
        return T

    def variance_scale(self) -> float:
        return float(np.var(self.mean)) or 1.0


def _as_solver(omega):
    if isinstance(omega, CovarianceAssembly):
        return omega.solve
    omega = np.asarray(omega, dtype=float)
    return lambda b: omega @ b


def log_likelihood(params: ModelParams, stack: KernelStack, Z, T, cov=None) -> float:
    """Gaussian log-density of one complete log-time vector."""
    cov = cov or assemble_covariance(stack, params.sigma2, params.noise2)
    r = np.asarray(T, dtype=float) - np.asarray(Z) @ params.beta
    u = solve_triangular(cov.factor, r, lower=True, check_finite=False)
    return -0.5 * (r.shape[0] * LOG_2PI + cov.log_det + float(u @ u))


def mc_objective(params: ModelParams, stack: KernelStack, Z, completed: CompletedData,
                 cov=None) -> float:
    """Average of :func:`log_likelihood` over the completed vectors."""
    cov = cov or assemble_covariance(stack, params.sigma2, params.noise2)
    r = completed.mean - np.asarray(Z) @ params.beta
    u = solve_triangular(cov.factor, r, lower=True, check_finite=False)
    quad = float(u @ u)
    F = completed.cov_factor
    if F.shape[1]:
        B = solve_triangular(cov.factor, F, lower=True, check_finite=False)
        quad += float(np.sum(B * B))
    return -0.5 * (completed.n * LOG_2PI + cov.log_det + quad)


def per_sample_loglik(params: ModelParams, stack: KernelStack, Z,
                      completed: CompletedData, cov=None) -> np.ndarray:
    """Log-likelihood of every completed vector, shape ``(s,)``."""
    cov = cov or assemble_covariance(stack, params.sigma2, params.noise2)
    part = completed.partition
    mu = np.asarray(Z) @ params.beta
    c, o = part.censored_idx, part.observed_idx
    r_o = completed.T_o - mu[o]
    Omega = cov.inverse()
    base = float(r_o @ Omega[np.ix_(o, o)] @ r_o)
    quad = np.full(completed.size, base)
    if part.n_c:
        R = completed.draws - mu[c]
        quad += 2.0 * R @ (Omega[np.ix_(c, o)] @ r_o)
        quad += np.einsum("ij,ij->i", R @ Omega[np.ix_(c, c)], R)
    return -0.5 * (completed.n * LOG_2PI + cov.log_det + quad)


def gls_beta(Z, omega, T_bar) -> np.ndarray:
    """Generalized least squares ``(Z' W Z)^{-1} Z' W T_bar``.

    ``omega`` is either the precision matrix ``W`` or a
    :class:`CovarianceAssembly` whose inverse plays that role.
    """
    Z = np.asarray(Z, dtype=float)
    WZ = _as_solver(omega)(Z)
    A = Z.T @ WZ
    rhs = WZ.T @ np.asarray(T_bar, dtype=float)
    if np.linalg.cond(A) > 1e12:
        raise CannotFitError("Z' W Z is singular; the fixed effects are not identified")
    return np.linalg.solve(A, rhs)


def mm_update_sigma(sigma2_prev, omega, gram, residuals) -> float:
    """Multiplicative MM update for one variance component.

    ``(s2 / sqrt(s)) * sqrt( sum_j r_j' W k W r_j / tr(W k) )`` with ``W`` the
    current precision matrix, ``k`` the Gram matrix and ``r_j`` the rows of
    ``residuals``.
    """
    if sigma2_prev == 0:
        return 0.0
    W = np.asarray(omega, dtype=float)
    k = gram.values if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=float)
    R = np.atleast_2d(np.asarray(residuals, dtype=float))
    WR = R @ W
    num = float(np.einsum("ij,ij->", WR @ k, WR))
    den = float(np.sum(W * k))
    return float(sigma2_prev / math.sqrt(R.shape[0]) * math.sqrt(num / den))


def mm_update_noise(noise2_prev, omega, residuals, floor=0.0) -> float:
    """MM update for the noise variance (the Gram matrix is the identity)."""
    W = np.asarray(omega, dtype=float)
    R = np.atleast_2d(np.asarray(residuals, dtype=float))
    WR = R @ W
    num = float(np.sum(WR * WR))
    val = noise2_prev / math.sqrt(R.shape[0]) * math.sqrt(num / float(np.trace(W)))
    return float(max(val, floor))


def extrapolate(prev, curr, b) -> np.ndarray:
    """Step past ``curr`` along ``curr - prev`` by ``1 / (sqrt(b) + 2)``, clamped at 0."""
    if b < 1:
        raise ValueError("iteration counter starts at 1")
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    return np.maximum(curr + (curr - prev) / (math.sqrt(b) + 2.0), 0.0)


def noise_floor(completed: CompletedData) -> float:
    return 1e-8 * completed.variance_scale()


def _mm_step(params, stack, Z, completed, floor):
    """One GLS + MM sweep. Returns the new parameters."""
    cov = assemble_covariance(stack, params.sigma2, params.noise2)
    Omega = cov.inverse()
    Omega = 0.5 * (Omega + Omega.T)
    beta = gls_beta(Z, Omega, completed.mean)
    r = completed.mean - Z @ beta
    w = Omega @ r
    F = completed.cov_factor
    G = Omega @ F if F.shape[1] else None
    sigma2 = params.sigma2.copy()
    for s, k in enumerate(stack):
        if sigma2[s] == 0.0:
            continue
        kv = k.values
        num = float(w @ kv @ w)
        if G is not None:
            num += float(np.sum((kv @ G) * G))
        den = float(np.sum(Omega * kv))
        sigma2[s] = params.sigma2[s] * math.sqrt(max(num, 0.0) / den)
    num = float(w @ w) + (float(np.sum(G * G)) if G is not None else 0.0)
    noise2 = max(params.noise2 * math.sqrt(num / float(np.trace(Omega))), floor)
    return ModelParams(beta, sigma2, noise2)


def maximize(init: ModelParams, stack: KernelStack, Z, completed: CompletedData,
             tol=1e-8, max_inner=500, accelerate=True, floor=None) -> MStepState:
    """Block ascent on the Monte Carlo objective (GLS + MM + extrapolation).

    Stops once an inner iteration improves the objective by no more than
    ``tol * |objective at init|``, or after ``max_inner`` iterations (then
    ``converged`` is False).
    """
    Z = np.asarray(Z, dtype=float)
    floor = noise_floor(completed) if floor is None else floor
    params = init
    if params.noise2 < floor:
        params = params.replace(noise2=floor)
    obj0 = mc_objective(params, stack, Z, completed)
    trace = [obj0]
    obj = obj0
    accepts = 0
    converged = False
    b = 0
    for b in range(1, max_inner + 1):
        new = _mm_step(params, stack, Z, completed, floor)
        new_obj = mc_objective(new, stack, Z, completed)
        if accelerate:
            ext_sigma = extrapolate(params.sigma2, new.sigma2, b)
            ext_noise = max(float(extrapolate([params.noise2], [new.noise2], b)[0]), floor)
            ext = new.replace(sigma2=ext_sigma, noise2=ext_noise)
            ext_obj = mc_objective(ext, stack, Z, completed)
            if ext_obj > new_obj:
                new, new_obj = ext, ext_obj
                accepts += 1
        gain = new_obj - obj
        if gain < 0:
            # a rounding-level decrease: keep the better point and stop
            converged = True
            break
        params, obj = new, new_obj
        trace.append(obj)
        if gain <= tol * abs(obj0):
            converged = True
            break
    return MStepState(params=params, loglik=obj, inner_iters=b,
                      extrapolation_accepts=accepts, converged=converged,
                      trace=tuple(trace))


class _EigenObjective:
    """Objective for one kernel in the kernel's eigenbasis.

    With ``k = U diag(lam) U'`` the covariance is ``U diag(s2 lam + noise2) U'``,
    so each evaluation is O(n) once the data are rotated.
    """

    def __init__(self, gram, Z, completed):
        lam, U = eigh(gram.values)
        self.lam = np.clip(lam, 0.0, None)
        self.n = lam.shape[0]
        self.Zr = U.T @ np.asarray(Z, dtype=float)
        self.Tr = U.T @ completed.mean
        F = completed.cov_factor
        self.cdiag = np.sum((U.T @ F) ** 2, axis=1) if F.shape[1] else np.zeros(self.n)

    def quad_terms(self, beta):
        r = self.Tr - self.Zr @ beta
        return r * r + self.cdiag

    def full(self, sigma2, noise2, beta) -> float:
        d = sigma2 * self.lam + noise2
        return -0.5 * (self.n * LOG_2PI + np.sum(np.log(d)) + np.sum(self.quad_terms(beta) / d))

    def profile(self, h, beta):
        """Objective with the total variance profiled out at share ``h``."""
        e = h * self.lam + (1.0 - h)
        v = float(np.mean(self.quad_terms(beta) / e))
        obj = -0.5 * (self.n * LOG_2PI + self.n * math.log(v) + np.sum(np.log(e)) + self.n)
        return obj, v

    def gls(self, h):
        wts = 1.0 / (h * self.lam + (1.0 - h))
        A = self.Zr.T @ (self.Zr * wts[:, None])
        if np.linalg.cond(A) > 1e12:
            raise CannotFitError("Z' W Z is singular; the fixed effects are not identified")
        return np.linalg.solve(A, self.Zr.T @ (wts * self.Tr))


_H_GRID = np.concatenate([[0.0], expit(np.linspace(-20.0, 20.0, 81))])


def _best_share(eo: _EigenObjective, beta, h_now):
    f = lambda h: -eo.profile(h, beta)[0]
    grid = _H_GRID
    vals = np.array([f(h) for h in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best_h, best_val = grid[i], vals[i]
    if hi > lo:
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-14 * max(1.0 - hi, 1e-6), "maxiter": 500})
        if res.fun < best_val:
            best_h, best_val = float(res.x), float(res.fun)
    now_val = f(h_now)
    if now_val <= best_val:
        return h_now
    return best_h


def single_kernel_maximize(init: ModelParams, gram: GramMatrix, Z, completed: CompletedData,
                           tol=1e-8, max_inner=500, floor=None) -> MStepState:
    """M-step for a single kernel via its eigendecomposition.

    Alternates GLS for the fixed effects with a 1-D search over the kernel's
    share ``h = s2 / (s2 + noise2)``; for fixed ``h`` the total variance has a
    closed-form maximizer, so each block is solved exactly.
    """
    Z = np.asarray(Z, dtype=float)
    floor = noise_floor(completed) if floor is None else floor
    eo = _EigenObjective(gram, Z, completed)
    s2, nz = float(init.sigma2[0]), max(init.noise2, floor)
    beta = init.beta
    obj0 = eo.full(s2, nz, beta)
    obj = obj0
    trace = [obj0]
    h = s2 / (s2 + nz)
    converged = False
    b = 0
    for b in range(1, max_inner + 1):
        beta_new = eo.gls(h)
        h_new = _best_share(eo, beta_new, h)
        new_obj, v = eo.profile(h_new, beta_new)
        s2_new, nz_new = v * h_new, v * (1.0 - h_new)
        if nz_new < floor:
            nz_new = floor
            new_obj = eo.full(s2_new, nz_new, beta_new)
        gain = new_obj - obj
        if gain < 0:
            converged = True
            break
        beta, h, s2, nz, obj = beta_new, h_new, s2_new, nz_new, new_obj
        trace.append(obj)
        if gain <= tol * abs(obj0):
            converged = True
            break
    params = ModelParams(beta, [s2], nz)
    return MStepState(params=params, loglik=obj, inner_iters=b, extrapolation_accepts=0,
                      converged=converged, trace=tuple(trace))


def variance_score(params: ModelParams, stack: KernelStack, Z, completed: CompletedData):
    """Gradient of :func:`mc_objective` in each variance component (kernels, then noise).

    ``d/d s2_s = -1/2 tr(W k_s) + 1/2 mean_j r_j' W k_s W r_j``.
    """
    cov = assemble_covariance(stack, params.sigma2, params.noise2)
    Omega = cov.inverse()
    Omega = 0.5 * (Omega + Omega.T)
    r = completed.mean - np.asarray(Z) @ params.beta
    w = Omega @ r
    F = completed.cov_factor
    G = Omega @ F
    out = []
    for k in list(stack) + [None]:
        kv = np.eye(stack.n) if k is None else k.values
        quad = float(w @ kv @ w) + float(np.sum((kv @ G) * G))
        out.append(-0.5 * float(np.sum(Omega * kv)) + 0.5 * quad)
    return np.array(out)
