"""Synthetic survival data with genomic effects, and a replication harness.

Four generating models are available:

1. Gaussian process AFT: ``T = Z b + eta + N(0, noise)``.
2. As 1 with logistic errors of the same variance.
3. Logistic errors and a logistic-driven genomic effect ``K^{1/2} v``.
4. Proportional hazards with a Gompertz baseline, ``W = Z[:, 1:] b + eta``.

The genomic covariance is either a genome-wide normalized RBF kernel scaled
by ``sigma_g2`` or a weighted sum of six gene-set kernels, four of which
carry signal. Expression is synthetic: Gaussian blocks of co-expressed genes.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SurvivalDataset
from .kernels import KernelStack, normalized_rbf, pathway_stack
from .mcem import FitResult, McemConfig, fit, fit_fixed_imputation, initialize_ipw
from .metrics import EvalConfig, evaluate
from .mstep import ModelParams
from .predict import predict_log_time

log = logging.getLogger(__name__)

AFT_BETA = (6.1, -0.5, -1.2, -2.0, -1e-5)
COX_BETA = (0.1, 0.3, 0.9, 9e-5)
PATHWAY_SIZES = (150, 150, 100, 100, 50, 50)
METHODS = ("GPR:K", "GPR:M", "LMM:K", "LMM:M", "GPR:I")
METRICS = ("c_index", "ibs", "iauc")


@dataclass(frozen=True)
class GompertzParams:
    alpha: float = math.pi / (1200.0 * math.sqrt(6.0))
    lam: float = field(default=float("nan"))

    def __post_init__(self):
        if math.isnan(self.lam):
            object.__setattr__(self, "lam",
                               self.alpha * math.exp(-0.5772 - self.alpha * 1400.0))
        if not (self.alpha > 0 and self.lam > 0):
            raise ValueError("Gompertz parameters must be positive")


@dataclass
class SimConfig:
    """Settings for one simulated study.

    ``beta_true`` and ``sigma_g2`` default by model: the AFT coefficients
    with ``sigma_g2 = 3`` for Models 1-3, the hazard coefficients (no
    intercept) with ``sigma_g2 = 4`` for Model 4.
    """

    n: int = 250
    p: int = 1000
    model: int = 1
    kernel_truth: str = "genome"
    beta_true: tuple | None = None
    sigma_g2: float | None = None
    noise_var: float = 0.5
    stage_probs: tuple = (0.50, 0.10, 0.24, 0.16)
    censor_quantiles: tuple = (0.20, 0.50, 0.70, 0.80)
    train_size: int = 200
    test_size: int = 50
    block_size: int = 50
    block_corr: float = 0.5
    age_years: tuple = (35.0, 85.0)
    seed: int = 0

    def __post_init__(self):
        if self.model not in (1, 2, 3, 4):
            raise ValueError("model must be 1, 2, 3 or 4")
        if self.kernel_truth not in ("genome", "pathway"):
            raise ValueError("kernel_truth must be 'genome' or 'pathway'")
        if self.beta_true is None:
            self.beta_true = COX_BETA if self.model == 4 else AFT_BETA
        self.beta_true = tuple(float(b) for b in self.beta_true)
        if self.sigma_g2 is None:
            self.sigma_g2 = 4.0 if self.model == 4 else 3.0
        self.stage_probs = tuple(float(v) for v in self.stage_probs)
        self.censor_quantiles = tuple(float(v) for v in self.censor_quantiles)
        if len(self.stage_probs) != 4 or min(self.stage_probs) < 0 \
                or abs(sum(self.stage_probs) - 1) > 1e-9:
            raise ValueError("stage_probs must be 4 probabilities summing to 1")
        if len(self.censor_quantiles) != 4 or not all(0 < q < 1 for q in self.censor_quantiles):
            raise ValueError("censor_quantiles must be 4 values in (0, 1)")
        if self.sigma_g2 < 0 or self.noise_var < 0:
            raise ValueError("variances must be nonnegative")
        need = 4 if self.model == 4 else 5
        if len(self.beta_true) != need:
            raise ValueError(f"model {self.model} needs {need} coefficients")
        if self.train_size + self.test_size > self.n:
            raise ValueError("train_size + test_size exceeds n")
        if not 0 <= self.block_corr < 1:
            raise ValueError("block_corr must lie in [0, 1)")


@dataclass
class SimulatedData:
    Z: np.ndarray
    X: np.ndarray
    stage: np.ndarray
    times: np.ndarray
    Y: np.ndarray
    delta: np.ndarray
    effect: np.ndarray
    masks: list
    weights: np.ndarray


def stages_from_design(Z) -> np.ndarray:
    """Stage index 0..3 from the intercept + three dummy columns."""
    D = np.asarray(Z)[:, 1:4]
    return np.where(D.any(axis=1), D.argmax(axis=1) + 1, 0)


def gen_covariates(cfg: SimConfig, rng):
    """Clinical design ``[1, stage II-IV dummies, age in days]`` and expression.

    Expression rows are independent; genes come in blocks of
    ``cfg.block_size`` sharing one latent factor, which gives within-block
    correlation ``cfg.block_corr``.
    """
    n, p = cfg.n, cfg.p
    stage = rng.choice(4, size=n, p=cfg.stage_probs)
    lo, hi = cfg.age_years
    age = rng.uniform(lo, hi, size=n) * 365.25
    Z = np.column_stack([np.ones(n)] + [(stage == s).astype(float) for s in (1, 2, 3)]
                        + [age])
    n_blocks = -(-p // cfg.block_size)
    factors = rng.standard_normal((n, n_blocks))
    shared = np.repeat(factors, cfg.block_size, axis=1)[:, :p]
    X = (math.sqrt(cfg.block_corr) * shared
         + math.sqrt(1.0 - cfg.block_corr) * rng.standard_normal((n, p)))
    return Z, X


def psd_sqrt(K) -> np.ndarray:
    """Symmetric square root, negative eigenvalues clipped to zero."""
    w, V = np.linalg.eigh(np.asarray(K, dtype=float))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def pathway_masks(p, rng, sizes=PATHWAY_SIZES) -> list:
    """Random gene sets; disjoint whenever ``p`` allows it."""
    if sum(sizes) <= p:
        perm = rng.permutation(p)
        cuts = np.cumsum((0,) + tuple(sizes))
        return [np.sort(perm[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]
    return [np.sort(rng.choice(p, size=min(s, p), replace=False)) for s in sizes]


def pathway_weights(total, rng, n_sets=6, n_active=4) -> np.ndarray:
    w = np.zeros(n_sets)
    active = rng.choice(n_sets, size=n_active, replace=False)
    w[active] = rng.uniform(0.0, 1.0, size=n_active)
    return w * (total / w.sum()) if w.sum() > 0 else w


def truth_covariance(X, cfg: SimConfig, rng):
    """Genomic covariance of the generating model.

    Returns ``(K, masks, weights)``. Gene-set masks and weights are drawn
    for both truths so that the random stream does not depend on which one
    is used; under the genome truth the weights are all zero.
    """
    masks = pathway_masks(X.shape[1], rng)
    weights = pathway_weights(cfg.sigma_g2, rng)
    if cfg.kernel_truth == "genome":
        K = cfg.sigma_g2 * normalized_rbf(X).values
        return K, masks, np.zeros(len(masks))
    K = np.zeros((X.shape[0], X.shape[0]))
    for m, w in zip(masks, weights):
        if w > 0:
            K += w * normalized_rbf(X, m).values
    return K, masks, weights


def logistic_errors(var, size, rng) -> np.ndarray:
    # logistic with scale s has variance pi^2 s^2 / 3
    return rng.logistic(0.0, math.sqrt(3.0 * var) / math.pi, size=size)


def draw_effect(K, model, rng) -> np.ndarray:
    n = K.shape[0]
    if not np.any(K):
        return np.zeros(n)
    root = psd_sqrt(K)
    v = logistic_errors(1.0, n, rng) if model == 3 else rng.standard_normal(n)
    return root @ v


def gen_genomic_effect(X, cfg: SimConfig, rng) -> np.ndarray:
    K, _, _ = truth_covariance(X, cfg, rng)
    return draw_effect(K, cfg.model, rng)


def gompertz_times(W, rng, params: GompertzParams | None = None) -> np.ndarray:
    """``S = log(1 - alpha log(u) / (lam exp(W))) / alpha`` with ``u ~ U(0, 1)``."""
    g = params or GompertzParams()
    W = np.asarray(W, dtype=float)
    u = rng.uniform(size=W.shape)
    return np.log1p(-g.alpha * np.log(u) / (g.lam * np.exp(W))) / g.alpha


def gen_survival(cfg: SimConfig, Z, effect, rng) -> np.ndarray:
    """Uncensored survival times under ``cfg.model``."""
    beta = np.asarray(cfg.beta_true)
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    if cfg.model == 4:
        return gompertz_times(Z[:, 1:] @ beta + effect, rng)
    if cfg.model == 1:
        err = rng.normal(0.0, math.sqrt(cfg.noise_var), size=n)
    else:
        err = logistic_errors(cfg.noise_var, n, rng)
    return np.exp(Z @ beta + effect + err)


def gen_censoring(times, stages, cfg: SimConfig, rng):
    """Exponential censoring whose mean is a stage-specific quantile of ``times``.

    Returns ``(Y, delta)`` with ``Y = min(time, censoring time)``.
    """
    times = np.asarray(times, dtype=float)
    q = np.quantile(times, cfg.censor_quantiles)
    mean = q[np.asarray(stages)]
    C = rng.exponential(mean)
    delta = (times <= C).astype(int)
    return np.minimum(times, C), delta


def simulate_dataset(cfg: SimConfig, rng) -> SimulatedData:
    Z, X = gen_covariates(cfg, rng)
    K, masks, weights = truth_covariance(X, cfg, rng)
    effect = draw_effect(K, cfg.model, rng)
    times = gen_survival(cfg, Z, effect, rng)
    stage = stages_from_design(Z)
    Y, delta = gen_censoring(times, stage, cfg, rng)
    return SimulatedData(Z, X, stage, times, Y, delta, effect, masks, weights)


def replication_rng(seed, rep):
    return np.random.default_rng([int(seed), int(rep)])


def _fit_method(method, ds, X, masks, mcem_cfg) -> tuple[FitResult, KernelStack]:
    if method.endswith(":K") or method == "GPR:I":
        stack = KernelStack((normalized_rbf(X),))
    else:
        stack = pathway_stack(X, masks, include_complement=False)
    if method.startswith("LMM"):
        return fit_fixed_imputation(ds, stack, mcem_cfg), stack
    init = None
    if method == "GPR:I":
        # a component started at zero stays at zero: intercept-only genomic model
        _, p0 = initialize_ipw(ds, 1)
        init = ModelParams(p0.beta, np.zeros(1), 2.0 * p0.noise2)
    return fit(ds, stack, mcem_cfg, init=init), stack


def run_replication(cfg: SimConfig, rep=0, methods=METHODS, mcem: McemConfig | None = None):
    """Simulate, split, fit every method and score it on the test set.

    Test metrics use the uncensored test times (no censoring correction,
    horizon = largest test time). Returns one record per method with the
    metrics and the correlation between imputed and true log-times over the
    censored training subjects. For the ``LMM`` methods that correlation is
    the one of the IPW mean imputation.
    """
    rng = replication_rng(cfg.seed, rep)
    sim = simulate_dataset(cfg, rng)
    perm = rng.permutation(cfg.n)
    tr, te = perm[:cfg.train_size], perm[cfg.train_size:cfg.train_size + cfg.test_size]
    # a stage absent from a small training split leaves a zero dummy column
    cols = [0] + [j for j in range(1, sim.Z.shape[1]) if np.ptp(sim.Z[tr, j]) > 0]
    Z_tr, Z_te = sim.Z[np.ix_(tr, cols)], sim.Z[np.ix_(te, cols)]
    ds = SurvivalDataset.from_arrays(sim.Y[tr], sim.delta[tr], Z=Z_tr, X=sim.X[tr])
    t_test = sim.times[te]
    ev = EvalConfig.for_test_set(t_test, np.ones(te.size, int), oracle_censoring=True)
    cens = sim.delta[tr] == 0
    truth_log = np.log(sim.times[tr][cens])
    base = mcem or McemConfig()
    fit_seed = int(replication_rng(cfg.seed, rep).integers(2**31 - 1))
    records = []
    for method in methods:
        mcfg = McemConfig(**{**asdict(base), "seed": fit_seed})
        res, stack = _fit_method(method, ds, sim.X[tr], sim.masks, mcfg)
        pred = predict_log_time(res, stack, ds.Z, Z_te, sim.X[te], sim.X[tr])
        scores = evaluate(pred.risk_score, pred.survival, t_test, np.ones(te.size, int), ev)
        corr = float(np.corrcoef(res.T_bar[cens], truth_log)[0, 1]) if cens.sum() > 1 \
            else float("nan")
        records.append({
            "rep": int(rep), "method": method,
            "c_index": scores["c_index"], "ibs": scores["ibs"], "iauc": scores["iauc"],
            "tau": scores["tau"], "imputation_corr": corr,
            "censoring_frac": float(cens.mean()),
            "converged": bool(res.converged), "n_iter": len(res.sr_history),
            "final_s": int(res.sr_history[-1]) if res.sr_history else 0,
        })
        log.info("rep %d %s: C=%.3f IBS=%.3f iAUC=%.3f corr=%.3f", rep, method,
                 scores["c_index"], scores["ibs"], scores["iauc"], corr)
    return records


def _run_one(args):
    cfg, rep, methods, mcem = args
    recs = run_replication(cfg, rep, methods, mcem)
    log.info("replication %d done", rep)
    return recs


def run_study(cfg: SimConfig, reps, methods=METHODS, mcem: McemConfig | None = None,
              jobs=1) -> list:
    """All replications, ``jobs`` at a time; records come back in rep order."""
    tasks = [(cfg, r, tuple(methods), mcem) for r in range(reps)]
    if jobs <= 1:
        out = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as ex:
            out = list(ex.map(_run_one, tasks))
    return [rec for recs in out for rec in recs]


def summarize(records) -> dict:
    """Mean relative performance per method and metric, plus raw means.

    In each replication a method's metric is divided by the best value among
    the methods (largest for C-index and AUC, smallest for Brier), so 1 marks
    the best method. ``scale`` is the mean of the best value.
    """
    reps = sorted({r["rep"] for r in records})
    methods = list(dict.fromkeys(r["method"] for r in records))
    by = {(r["rep"], r["method"]): r for r in records}
    relative, raw, scale = {}, {}, {}
    for metric in METRICS:
        pick = min if metric == "ibs" else max
        ratios = {m: [] for m in methods}
        bests = []
        for rep in reps:
            vals = {m: by[(rep, m)][metric] for m in methods if (rep, m) in by}
            best = pick(vals.values())
            bests.append(best)
            for m, v in vals.items():
                ratios[m].append(v / best)
        relative[metric] = {m: float(np.mean(v)) for m, v in ratios.items()}
        raw[metric] = {m: float(np.mean([by[(r, m)][metric] for r in reps if (r, m) in by]))
                       for m in methods}
        scale[metric] = float(np.mean(bests))
    corr = {m: float(np.nanmean([by[(r, m)]["imputation_corr"] for r in reps
                                 if (r, m) in by])) for m in methods}
    return {"n_reps": len(reps), "methods": methods, "relative": relative, "mean": raw,
            "scale": scale, "imputation_corr": corr}
