"""Ascent-based Monte Carlo EM for the Gaussian process AFT model.

Each outer iteration imputes the censored log-times by Gibbs sampling from
their truncated conditional normal, runs the M-step on the completed data,
and accepts the new parameters only if the Monte Carlo estimate of the
likelihood gain exceeds ``z_crit`` times its standard error. On rejection the
sample is extended (same chain) to twice its size; once a rejection happens
at ``s_max`` or more samples the fit terminates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .data import Censor, Partition, SurvivalDataset, partition_by_censoring
from .errors import CannotFitError
from .kernels import KernelStack, assemble_covariance
from .mstep import (CompletedData, ModelParams, maximize, mc_objective, per_sample_loglik,
                    single_kernel_maximize)
from .tmvn import SampleBatch, TruncatedMvnSpec, gibbs_sample, mcse_spectral

log = logging.getLogger(__name__)


@dataclass
class McemConfig:
    s1: int = 500
    s_max: int = 100_000
    z_crit: float = 1.96
    thin: int = 10
    burnin: int = 100
    mstep_tol: float = 1e-8
    max_inner: int = 500
    max_iter: int = 200
    fastpath: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.s1 < 1 or self.s_max < self.s1:
            raise ValueError("need 1 <= s1 <= s_max")
        if not self.z_crit > 0:
            raise ValueError("z_crit must be positive")
        if self.thin < 1 or self.burnin < 0:
            raise ValueError("need thin >= 1 and burnin >= 0")


@dataclass
class FitResult:
    params: ModelParams
    T_bar: np.ndarray
    loglik: float
    loglik_trace: list
    sr_history: list
    diagnostics: list
    converged: bool
    config: McemConfig
    kernel_names: list = field(default_factory=list)

    @property
    def variance_shares(self) -> dict:
        tot = self.params.total_variance
        names = self.kernel_names or [f"kernel{i + 1}" for i in range(len(self.params.sigma2))]
        out = {nm: float(s) / tot for nm, s in zip(names, self.params.sigma2)}
        out["noise"] = self.params.noise2 / tot
        return out

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "kernel_names": list(self.kernel_names),
            "variance_shares": self.variance_shares,
            "T_bar": np.asarray(self.T_bar).tolist(),
            "loglik": self.loglik,
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "sr_history": [int(v) for v in self.sr_history],
            "diagnostics": self.diagnostics,
            "converged": bool(self.converged),
            "config": asdict(self.config),
            "seed": self.config.seed,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        return cls(
            params=ModelParams.from_dict(d["params"]),
            T_bar=np.asarray(d["T_bar"], dtype=float),
            loglik=d["loglik"],
            loglik_trace=list(d["loglik_trace"]),
            sr_history=list(d["sr_history"]),
            diagnostics=list(d["diagnostics"]),
            converged=d["converged"],
            config=McemConfig(**d["config"]),
            kernel_names=list(d.get("kernel_names", [])),
        )


def _km_jumps(time, event):
    """Kaplan-Meier jump times and jump sizes of the survival curve."""
    order = np.lexsort((1 - event, time))  # events before censorings at ties
    t, e = time[order], event[order]
    uniq = np.unique(t[e == 1])
    at_risk = np.array([np.sum(time >= u) for u in uniq])
    deaths = np.array([np.sum((time == u) & (event == 1)) for u in uniq])
    surv = np.cumprod(1.0 - deaths / at_risk)
    prev = np.concatenate([[1.0], surv[:-1]])
    return uniq, prev - surv, surv


def initialize_ipw(ds: SurvivalDataset, n_kernels=1):
    """IPW mean imputation of censored log-times and matching starting values.

    A right-censored time ``y`` is replaced by the Kaplan-Meier conditional
    mean ``E[T | T > y]``. Mass the curve leaves beyond the last event, and
    subjects censored after it, are assigned the last event time. Left- and
    interval-censored subjects start at the midpoint of their finite bounds.

    Returns
    -------
    T0 : (n,) ndarray
        Completed log-times.
    params0 : ModelParams
        OLS fixed effects; residual variance split evenly over the
        ``n_kernels`` components and the noise.
    """
    time = ds.time
    is_event = (ds.event == Censor.EVENT).astype(int)
    if is_event.sum() == 0:
        raise CannotFitError("no observed events; the model cannot be fitted")
    right = ds.event == Censor.RIGHT
    km_event = np.where(right | (ds.event == Censor.EVENT), is_event, 0)
    use = right | (ds.event == Censor.EVENT)
    jt, dS, surv = _km_jumps(time[use], km_event[use])
    t_last = jt[-1]
    T0 = ds.log_time.copy()
    for i in np.flatnonzero(right):
        y = time[i]
        after = jt > y
        if not after.any():
            T0[i] = math.log(t_last)
            continue
        s_y = 1.0 if not (jt <= y).any() else surv[jt <= y][-1]
        tail = surv[-1]
        val = (np.sum(jt[after] * dS[after]) + tail * t_last) / s_y
        T0[i] = math.log(val)
    other = (ds.event == Censor.LEFT) | (ds.event == Censor.INTERVAL)
    for i in np.flatnonzero(other):
        lo, hi = ds.lower[i], ds.upper[i]
        T0[i] = hi if np.isinf(lo) else 0.5 * (lo + hi)
    beta, *_ = np.linalg.lstsq(ds.Z, T0, rcond=None)
    resid = T0 - ds.Z @ beta
    var = float(resid @ resid) / max(len(T0) - ds.Z.shape[1], 1)
    share = var / (n_kernels + 1)
    params0 = ModelParams(beta, np.full(n_kernels, share), share)
    return T0, params0


def conditional_spec(params: ModelParams, stack: KernelStack, Z, T_o, partition: Partition,
                     lower, upper) -> TruncatedMvnSpec:
    """Truncated conditional normal of the censored log-times given the observed."""
    cov = assemble_covariance(stack, params.sigma2, params.noise2)
    K = cov.Ktilde
    c, o = partition.censored_idx, partition.observed_idx
    mu = np.asarray(Z) @ params.beta
    Kcc = K[np.ix_(c, c)]
    if partition.n_o:
        Koo = K[np.ix_(o, o)]
        Kco = K[np.ix_(c, o)]
        Lo = cholesky(Koo, lower=True, check_finite=False)
        A = cho_solve((Lo, True), Kco.T, check_finite=False).T
        mean = mu[c] + A @ (T_o - mu[o])
        cov_c = Kcc - A @ Kco.T
    else:
        mean, cov_c = mu[c], Kcc
    cov_c = 0.5 * (cov_c + cov_c.T)
    return TruncatedMvnSpec(mean=mean, cov=cov_c, lower=lower[c], upper=upper[c])


def estep_sample(params: ModelParams, stack: KernelStack, ds: SurvivalDataset,
                 partition: Partition, s_r, rng, warm_start=None, thin=10,
                 burnin=100) -> SampleBatch:
    """Draw ``s_r`` thinned Gibbs samples of the censored log-times."""
    if partition.n_c < 1:
        raise ValueError("no censored subjects to sample")
    T_o = ds.log_time[partition.observed_idx]
    spec = conditional_spec(params, stack, ds.Z, T_o, partition, ds.lower, ds.upper)
    if warm_start is None:
        init = np.clip(np.maximum(spec.lower, spec.mean), spec.lower, spec.upper)
    else:
        init = np.clip(warm_start, spec.lower, spec.upper)
    return gibbs_sample(spec, s_r, thin=thin, burnin=burnin, init=init, rng=rng)


def ascent_test(old: ModelParams, new: ModelParams, completed: CompletedData,
                stack: KernelStack, Z, z_crit=1.96):
    """Accept ``new`` if the mean per-sample log-likelihood gain beats ``z_crit`` SEs.

    Returns ``(accepted, delta, ase)``.
    """
    diff = (per_sample_loglik(new, stack, Z, completed)
            - per_sample_loglik(old, stack, Z, completed))
    return _ascent_decision(diff, z_crit)


def _ascent_decision(diff, z_crit):
    diff = np.asarray(diff, dtype=float)
    delta = float(diff.mean())
    if diff.shape[0] >= 20:
        ase = mcse_spectral(diff)
    elif diff.shape[0] > 1:
        ase = float(diff.std(ddof=1) / math.sqrt(diff.shape[0]))
    else:
        ase = 0.0
    return bool(delta > z_crit * ase), delta, ase


def _mstep(init, stack, Z, completed, config):
    if config.fastpath and len(stack) == 1 and init.sigma2[0] > 0:
        return single_kernel_maximize(init, stack[0], Z, completed, tol=config.mstep_tol,
                                      max_inner=config.max_inner)
    return maximize(init, stack, Z, completed, tol=config.mstep_tol,
                    max_inner=config.max_inner)


def fit(ds: SurvivalDataset, stack: KernelStack, config: McemConfig | None = None,
        init: ModelParams | None = None) -> FitResult:
    """Fit the model by ascent-based MC-EM.

    Parameters
    ----------
    ds : SurvivalDataset
    stack : KernelStack
        Gram matrices over the subjects of ``ds``.
    config : McemConfig, optional
    init : ModelParams, optional
        Starting values. Defaults to the IPW-imputation start; a component
        started at zero stays at zero.
    """
    config = config or McemConfig()
    if stack.n != ds.n:
        raise ValueError("kernel stack and dataset disagree on sample count")
    part = partition_by_censoring(ds)
    q1 = ds.Z.shape[1]
    if part.n_o == 0:
        raise CannotFitError("no observed events; the model cannot be fitted")
    if part.n_o < q1 + 1:
        raise CannotFitError(f"{part.n_o} events cannot identify {q1} fixed effects")
    if np.linalg.matrix_rank(ds.Z) < q1:
        raise CannotFitError("design matrix Z is rank deficient")
    if init is None:
        _, init = initialize_ipw(ds, len(stack))
    Z = ds.Z
    T_o = ds.log_time[part.observed_idx]
    rng = np.random.default_rng(config.seed)
    names = stack.names

    if part.n_c == 0:
        completed = CompletedData.from_complete(ds.log_time)
        state = _mstep(init, stack, Z, completed, config)
        return FitResult(state.params, completed.mean, state.loglik, [state.loglik], [],
                         [], state.converged, config, names)

    theta = init
    s = config.s1
    batch = None
    chain = None
    trace, history, diags = [], [], []
    converged = False
    completed = None
    for r in range(1, config.max_iter + 1):
        if batch is None:
            batch = estep_sample(theta, stack, ds, part, s, rng, warm_start=chain,
                                 thin=config.thin, burnin=config.burnin)
        chain = batch.last
        completed = CompletedData(T_o, part, batch.draws)
        state = _mstep(theta, stack, Z, completed, config)
        accepted, delta, ase = ascent_test(theta, state.params, completed, stack, Z,
                                           config.z_crit)
        history.append(s)
        diags.append({"iter": r, "s_r": s, "accepted": accepted, "delta": delta,
                      "ase": ase, "inner_iters": state.inner_iters,
                      "sigma2": state.params.sigma2.tolist(),
                      "noise2": state.params.noise2})
        log.info("iter %d s_r=%d delta=%.4g ase=%.4g %s sigma2=%s noise2=%.4g", r, s,
                 delta, ase, "accept" if accepted else "reject",
                 np.array2string(state.params.sigma2, precision=4), state.params.noise2)
        if accepted:
            theta = state.params
            trace.append(state.loglik)
            batch = None
            continue
        trace.append(state.trace[0])
        if s >= config.s_max:
            converged = True
            break
        extra = estep_sample(theta, stack, ds, part, s, rng, warm_start=chain,
                             thin=config.thin, burnin=0)
        batch = batch.append(extra)
        s *= 2
    if batch is not None:
        completed = CompletedData(T_o, part, batch.draws)
    loglik = mc_objective(theta, stack, Z, completed)
    return FitResult(theta, completed.mean, loglik, trace, history, diags, converged,
                     config, names)


def fit_fixed_imputation(ds: SurvivalDataset, stack: KernelStack, config=None,
                         init=None) -> FitResult:
    """Fit treating IPW-imputed log-times as observed (no MC-EM)."""
    config = config or McemConfig()
    T0, p0 = initialize_ipw(ds, len(stack))
    init = init or p0
    completed = CompletedData.from_complete(T0)
    state = _mstep(init, stack, ds.Z, completed, config)
    return FitResult(state.params, T0, state.loglik, [state.loglik], [], [],
                     state.converged, config, stack.names)
