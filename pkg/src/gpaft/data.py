"""Survival data containers, file ingestion, and expression preprocessing.

Censoring of every kind is stored as a truncation interval ``[lower, upper]``
on the log-time scale, so the sampler never needs to know which kind it is
looking at:

===========  ======  ==========================
status code  kind    log-scale bounds
===========  ======  ==========================
1            event   ``[log y, log y]``
0            right   ``[log y, +inf)``
2            left    ``(-inf, log y]``
3            interval ``[log y, log y2]``
===========  ======  ==========================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import pandas as pd

from .errors import DataValidationError, SchemaError

log = logging.getLogger(__name__)


class Censor(IntEnum):
    RIGHT = 0
    EVENT = 1
    LEFT = 2
    INTERVAL = 3


@dataclass
class SurvivalDataset:
    ids: list
    time: np.ndarray
    event: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    Z: np.ndarray = None
    X: np.ndarray = None
    z_names: list = field(default_factory=lambda: ["intercept"])
    genes: list = field(default_factory=list)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=int)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = len(self.time)
        if self.Z is None:
            self.Z = np.ones((n, 1))
        if self.X is None:
            self.X = np.zeros((n, 0))
        self.Z = np.asarray(self.Z, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.time)

    def validate(self):
        n = self.n
        if len(self.ids) != n or self.Z.shape[0] != n or self.X.shape[0] != n:
            raise DataValidationError(
                f"row counts disagree: ids={len(self.ids)}, time={n}, "
                f"Z={self.Z.shape[0]}, X={self.X.shape[0]}"
            )
        bad = np.flatnonzero(~(self.time > 0))
        if bad.size:
            raise DataValidationError(
                f"nonpositive survival time for subject {self.ids[bad[0]]!r}"
            )
        if not np.allclose(self.Z[:, 0], 1.0, rtol=0, atol=0):
            raise DataValidationError("first column of Z must be identically 1")
        bad = np.flatnonzero(self.lower > self.upper)
        if bad.size:
            raise DataValidationError(
                f"lower bound exceeds upper bound for subject {self.ids[bad[0]]!r}"
            )

    @property
    def log_time(self) -> np.ndarray:
        return np.log(self.time)

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(
            ids=[self.ids[i] for i in idx],
            time=self.time[idx],
            event=self.event[idx],
            lower=self.lower[idx],
            upper=self.upper[idx],
            Z=self.Z[idx],
            X=self.X[idx],
            z_names=list(self.z_names),
            genes=list(self.genes),
        )

    @classmethod
    def from_arrays(cls, time, event, Z=None, X=None, ids=None, time2=None, **kw):
        """Build a dataset from times and status codes, deriving the bounds."""
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=int)
        if ids is None:
            ids = [f"s{i + 1}" for i in range(len(time))]
        lower, upper = censoring_bounds(time, event, time2)
        return cls(ids=list(ids), time=time, event=event, lower=lower,
                   upper=upper, Z=Z, X=X, **kw)


@dataclass(frozen=True)
class Partition:
    censored_idx: np.ndarray
    observed_idx: np.ndarray

    @property
    def n_c(self) -> int:
        return len(self.censored_idx)

    @property
    def n_o(self) -> int:
        return len(self.observed_idx)

    @property
    def n(self) -> int:
        return self.n_c + self.n_o


def censoring_bounds(time, event, time2=None):
    """Log-scale truncation bounds for each status code."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        logt = np.log(time)
    lower = np.full(len(time), -np.inf)
    upper = np.full(len(time), np.inf)
    unknown = ~np.isin(event, [c.value for c in Censor])
    if unknown.any():
        raise DataValidationError(f"unknown status code {event[unknown][0]}")
    m = event == Censor.EVENT
    lower[m] = upper[m] = logt[m]
    m = event == Censor.RIGHT
    lower[m] = logt[m]
    m = event == Censor.LEFT
    upper[m] = logt[m]
    m = event == Censor.INTERVAL
    if m.any():
        if time2 is None:
            raise SchemaError("interval-censored rows need a time2 column")
        time2 = np.asarray(time2, dtype=float)
        if np.any(~(time2[m] > 0)):
            raise DataValidationError("interval upper time must be positive")
        lower[m] = logt[m]
        upper[m] = np.log(time2[m])
    return lower, upper


@dataclass(frozen=True)
class ColumnMap:
    id: str = "id"
    time: str = "time"
    status: str = "status"
    time2: str = "time2"


def load_survival_table(path, columns: ColumnMap | None = None) -> SurvivalDataset:
    """Read a survival CSV (id, time, status[, time2]) into a dataset."""
    columns = columns or ColumnMap()
    df = pd.read_csv(path, skipinitialspace=True)
    df.columns = [c.strip() for c in df.columns]
    for col in (columns.id, columns.time, columns.status):
        if col not in df.columns:
            raise SchemaError(f"{path}: missing column {col!r}")
    time = pd.to_numeric(df[columns.time], errors="coerce").to_numpy(float)
    ids = df[columns.id].astype(str).str.strip().tolist()
    bad = np.flatnonzero(~(time > 0))
    if bad.size:
        i = bad[0]
        raise DataValidationError(
            f"{path}: row {i + 1} (id={ids[i]!r}) has nonpositive time {df[columns.time].iloc[i]!r}"
        )
    status = pd.to_numeric(df[columns.status], errors="coerce")
    if status.isna().any():
        raise DataValidationError(f"{path}: non-numeric status code")
    time2 = None
    if columns.time2 in df.columns:
        time2 = pd.to_numeric(df[columns.time2], errors="coerce").to_numpy(float)
    return SurvivalDataset.from_arrays(time, status.to_numpy(int), ids=ids, time2=time2)


def load_covariates(path, ids, id_column="id", columns=None):
    """Read a covariate CSV keyed by id and return (Z, names) aligned to ``ids``.

    Non-numeric columns are one-hot encoded with the first level dropped.
    Passing ``columns`` (names from a previous call) reindexes onto that
    layout, filling absent dummy columns with zero.
    """
    df = pd.read_csv(path, skipinitialspace=True)
    df.columns = [c.strip() for c in df.columns]
    if id_column not in df.columns:
        raise SchemaError(f"{path}: missing column {id_column!r}")
    df[id_column] = df[id_column].astype(str).str.strip()
    df = df.set_index(id_column)
    missing = [i for i in ids if i not in df.index]
    if missing:
        raise SchemaError(f"{path}: no covariates for id {missing[0]!r}")
    df = df.loc[list(ids)]
    df = pd.get_dummies(df, drop_first=columns is None, dtype=float)
    if columns is not None:
        df = df.reindex(columns=columns, fill_value=0.0)
    if df.isna().any().any():
        raise DataValidationError(f"{path}: missing covariate values")
    names = list(df.columns)
    Z = np.column_stack([np.ones(len(ids)), df.to_numpy(float)])
    return Z, names


def load_expression(path, ids, genes_as="cols", id_column="id"):
    """Read an expression CSV aligned to ``ids``.

    ``genes_as="cols"`` means one row per sample (first column the id);
    ``genes_as="rows"`` means one row per gene with sample ids as the header.
    Returns ``(X, gene_names)`` with samples as rows.
    """
    if genes_as not in ("rows", "cols"):
        raise ValueError("genes_as must be 'rows' or 'cols'")
    df = pd.read_csv(path, skipinitialspace=True)
    df.columns = [str(c).strip() for c in df.columns]
    if genes_as == "rows":
        df = df.set_index(df.columns[0]).T
    else:
        if id_column not in df.columns:
            raise SchemaError(f"{path}: missing column {id_column!r}")
        df = df.set_index(id_column)
    df.index = df.index.astype(str).str.strip()
    missing = [i for i in ids if i not in df.index]
    if missing:
        raise SchemaError(f"{path}: no expression for id {missing[0]!r}")
    df = df.loc[list(ids)]
    X = df.to_numpy(float)
    if not np.isfinite(X).all():
        raise DataValidationError(f"{path}: non-finite expression values")
    return X, [str(g) for g in df.columns]


def preprocess_expression(counts, min_q75=20.0):
    """Filter low-count genes and upper-quartile normalize on the log10 scale.

    Genes whose across-sample 75th percentile count is ``<= min_q75`` are
    dropped. Each kept entry becomes ``log10((t + 1) / q)``, where ``q`` is
    the sample's 75th percentile count over *all* genes, taken before
    filtering.

    Returns
    -------
    X : (n, p') ndarray
    kept : (p',) ndarray of int
        Column indices of the retained genes.
    """
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise DataValidationError("read counts must be nonnegative")
    q_sample = np.percentile(counts, 75, axis=1)
    zero = np.flatnonzero(q_sample <= 0)
    if zero.size:
        raise DataValidationError(
            f"sample {zero[0]} has a zero 75th-percentile count"
        )
    q_gene = np.percentile(counts, 75, axis=0)
    kept = np.flatnonzero(q_gene > min_q75)
    X = np.log10((counts[:, kept] + 1.0) / q_sample[:, None])
    return X, kept


@dataclass(frozen=True)
class ConfounderFit:
    coef: np.ndarray
    add_intercept: bool

    def design(self, C):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if self.add_intercept:
            C = np.column_stack([np.ones(C.shape[0]), C])
        return C


def _confounder_design(C):
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    add_intercept = not np.all(C == C[:1], axis=0).any()
    D = np.column_stack([np.ones(C.shape[0]), C]) if add_intercept else C
    rank = np.linalg.matrix_rank(D)
    if rank < D.shape[1]:
        raise DataValidationError(
            f"confounder matrix is rank deficient (rank {rank} < {D.shape[1]} "
            "columns incl. intercept); remove collinear columns"
        )
    return D, add_intercept


def residualize_confounders(X, C, return_coef=False):
    """Least-squares residuals of each column of ``X`` regressed on ``C``.

    An intercept is prepended unless ``C`` already has a constant column.
    With ``return_coef`` a :class:`ConfounderFit` is also returned so the
    same adjustment can be applied to new samples.
    """
    X = np.asarray(X, dtype=float)
    D, add_intercept = _confounder_design(C)
    coef, *_ = np.linalg.lstsq(D, X, rcond=None)
    R = X - D @ coef
    if return_coef:
        return R, ConfounderFit(coef=coef, add_intercept=add_intercept)
    return R


def apply_confounder_adjustment(X, C, fit: ConfounderFit):
    """Residualize new samples using coefficients fitted on training data."""
    return np.asarray(X, dtype=float) - fit.design(C) @ fit.coef


def partition_by_censoring(ds: SurvivalDataset) -> Partition:
    """Split subject indices into censored (any non-event code) and observed."""
    event = np.asarray(ds.event)
    observed = np.flatnonzero(event == Censor.EVENT)
    censored = np.flatnonzero(event != Censor.EVENT)
    return Partition(censored_idx=censored, observed_idx=observed)

