"""Survival prediction metrics with inverse-probability-of-censoring weights.

``H_hat`` below is always a survival curve of the *censoring* time, usually
``kaplan_meier(times, 1 - events)``. Passing ``None`` means no censoring
correction (``H_hat == 1``), which is what a simulation with fully observed
test times uses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous nonincreasing step function starting at 1."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.concatenate([[1.0], self.values])
        return vals[idx + 1]


ONE = StepFunction(np.array([]), np.array([]))


@dataclass(frozen=True)
class EvalConfig:
    tau: float
    grid: np.ndarray
    oracle_censoring: bool = False

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] > self.tau * (1 + 1e-12):
            raise ValueError("grid must be strictly increasing within (0, tau]")

    @classmethod
    def for_test_set(cls, times, events, oracle_censoring=False, tau=None, n_grid=100):
        """Default horizon and grid for a test set.

        With oracle censoring the horizon is the largest test time; otherwise
        the second largest observed test time.
        """
        if tau is None:
            tau = default_tau(times, oracle_censoring)
        grid = np.linspace(tau / n_grid, tau, n_grid)
        return cls(tau=float(tau), grid=grid, oracle_censoring=oracle_censoring)


def default_tau(times, oracle_censoring=False) -> float:
    t = np.sort(np.asarray(times, dtype=float))
    if oracle_censoring or t.size < 2:
        return float(t[-1])
    return float(t[-2])


def kaplan_meier(times, indicators) -> StepFunction:
    """Product-limit estimate ``prod_{t_k <= t} (1 - d_k / n_k)``.

    ``indicators`` marks the events of interest; pass ``1 - delta`` to
    estimate the censoring distribution.
    """
    times = np.asarray(times, dtype=float)
    ind = np.asarray(indicators, dtype=int)
    if times.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    jt = np.unique(times[ind == 1])
    if jt.size == 0:
        return StepFunction(np.array([]), np.array([]))
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, jt, side="left")
    d = np.array([np.sum((times == u) & (ind == 1)) for u in jt])
    return StepFunction(jt, np.cumprod(1.0 - d / at_risk))


def censoring_km(times, events) -> StepFunction:
    return kaplan_meier(times, 1 - np.asarray(events, dtype=int))


def _ipcw(times, H_hat, what):
    H = np.ones_like(times) if H_hat is None else np.asarray(H_hat(times), dtype=float)
    zero = H <= 0
    if zero.any():
        warnings.warn(f"{what}: {int(zero.sum())} subject(s) with zero censoring "
                      "survival excluded", stacklevel=3)
    inv = np.zeros_like(H)
    inv[~zero] = 1.0 / H[~zero]
    return inv


def _uno_terms(risk, times, events, tau, H_hat):
    risk = np.asarray(risk, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    w = events * _ipcw(times, H_hat, "C-index") ** 2 * (times < tau)
    comp = times[:, None] < times[None, :]
    conc = (risk[:, None] > risk[None, :]) + 0.5 * (risk[:, None] == risk[None, :])
    num = float(np.sum(w[:, None] * comp * conc))
    den = float(np.sum(w[:, None] * comp))
    pairs = int(np.sum(comp & (w[:, None] > 0)))
    return num, den, pairs


def uno_c_index(risk, times, events, tau, H_hat=None) -> float:
    """IPCW concordance between risk scores and survival times (ties count 1/2)."""
    num, den, _ = _uno_terms(risk, times, events, tau, H_hat)
    if den <= 0:
        raise ValueError("no comparable pairs; C-index undefined")
    return num / den


def comparable_pairs(times, events, tau, H_hat=None) -> int:
    return _uno_terms(np.zeros(len(times)), times, events, tau, H_hat)[2]


def brier(t, surv_estimates, times, events, H_hat=None) -> float:
    """IPCW Brier score at time ``t``.

    Subjects failing by ``t`` contribute ``S(t)^2 / H(S_i)``; subjects still
    at risk after ``t`` contribute ``(1 - S(t))^2 / H(S_i)``; subjects
    censored by ``t`` contribute nothing.
    """
    S = np.asarray(surv_estimates, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    inv = _ipcw(times, H_hat, "Brier")
    failed = (times <= t) & (events == 1)
    alive = times > t
    terms = S**2 * failed * inv + (1.0 - S) ** 2 * alive * inv
    return float(np.mean(terms))


def integrate_over_horizon(values, grid, tau) -> float:
    """``tau^{-1} int_0^tau f`` by the trapezoid rule on ``grid``.

    ``f`` is held at its first grid value on ``[0, grid[0]]``.
    """
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    area = np.trapezoid(values, grid) + grid[0] * values[0]
    return float(area / tau)


def integrated_brier(surv_fn, times, events, tau, grid=None, H_hat=None) -> float:
    """Integrated Brier score over ``[0, tau]``.

    ``surv_fn(t)`` returns every test subject's predicted survival at ``t``.
    """
    if grid is None:
        grid = np.linspace(tau / 100, tau, 100)
    b = [brier(t, surv_fn(t), times, events, H_hat) for t in grid]
    return integrate_over_horizon(b, grid, tau)


def auc_at(t, risk, times, events, H_hat=None):
    """IPCW cumulative/dynamic AUC at ``t``; ``None`` if there are no cases or controls."""
    risk = np.asarray(risk, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    w = ((times <= t) & (events == 1)) * _ipcw(times, H_hat, "AUC")
    controls = times > t
    if not np.any(w > 0) or not controls.any():
        return None
    rc = risk[controls]
    conc = (risk[:, None] > rc[None, :]) + 0.5 * (risk[:, None] == rc[None, :])
    return float(np.sum(w[:, None] * conc) / (w.sum() * controls.sum()))


def integrated_auc(risk, times, events, tau, grid=None, H_hat=None) -> float:
    """Time-dependent AUC averaged over ``grid`` with Kaplan-Meier weights.

    Grid point ``t_k`` gets weight ``S(t_{k-1}) - S(t_k)`` from the
    Kaplan-Meier curve of the test times, renormalized over the points where
    the AUC is defined.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if grid is None:
        grid = np.linspace(tau / 100, tau, 100)
    grid = np.asarray(grid, dtype=float)
    S = kaplan_meier(times, events)
    s_grid = S(grid)
    wts = np.concatenate([[1.0], s_grid[:-1]]) - s_grid
    aucs, keep = [], []
    for k, t in enumerate(grid):
        a = auc_at(t, risk, times, events, H_hat)
        if a is None:
            continue
        aucs.append(a)
        keep.append(k)
    if len(keep) < len(grid):
        warnings.warn(f"AUC undefined at {len(grid) - len(keep)} grid time(s); skipped",
                      stacklevel=2)
    if not keep:
        raise ValueError("AUC undefined at every grid time")
    aucs = np.array(aucs)
    w = wts[keep]
    if w.sum() <= 0:
        w = np.ones_like(aucs)
    return float(np.sum(w * aucs) / w.sum())


def evaluate(risk, surv_fn, times, events, config: EvalConfig) -> dict:
    """C-index, integrated Brier score and integrated AUC on one test set."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if config.oracle_censoring:
        H, ev = None, np.ones_like(events)
    else:
        H, ev = censoring_km(times, events), events
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {
            "c_index": uno_c_index(risk, times, ev, config.tau, H),
            "ibs": integrated_brier(surv_fn, times, ev, config.tau, config.grid, H),
            "iauc": integrated_auc(risk, times, ev, config.tau, config.grid, H),
            "tau": float(config.tau),
            "n_pairs": comparable_pairs(times, ev, config.tau, H),
        }
