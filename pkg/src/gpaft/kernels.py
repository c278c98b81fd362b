"""Normalized RBF Gram matrices and the model covariance they induce.

The normalized RBF kernel divides squared distances by the largest pairwise
squared distance among the training rows. That denominator is frozen on the
:class:`GramMatrix` so test points are scored against the same scale.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, eigvalsh
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import DegenerateKernelError, NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    name: str
    norm_denominator: float
    mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def columns(self, X):
        X = np.asarray(X, dtype=float)
        return X if self.mask is None else X[..., self.mask]


@dataclass(frozen=True)
class KernelStack:
    kernels: tuple
    n: int = field(init=False)

    def __post_init__(self):
        if len(self.kernels) < 1:
            raise ValueError("a kernel stack needs at least one kernel")
        sizes = {k.n for k in self.kernels}
        if len(sizes) != 1:
            raise ValueError(f"kernels disagree on sample count: {sorted(sizes)}")
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "n", sizes.pop())

    def __len__(self):
        return len(self.kernels)

    def __iter__(self):
        return iter(self.kernels)

    def __getitem__(self, i):
        return self.kernels[i]

    @property
    def names(self):
        return [k.name for k in self.kernels]

    def subset(self, idx) -> "KernelStack":
        """Restrict every Gram matrix to the rows/columns ``idx``."""
        idx = np.asarray(idx)
        return KernelStack(tuple(
            GramMatrix(k.values[np.ix_(idx, idx)], k.name, k.norm_denominator, k.mask)
            for k in self.kernels
        ))

    def with_kernel(self, gram: GramMatrix) -> "KernelStack":
        return KernelStack(self.kernels + (gram,))


@dataclass(frozen=True)
class CovarianceAssembly:
    Ktilde: np.ndarray
    factor: np.ndarray
    log_det: float
    jitter: float = 0.0

    def solve(self, b):
        return cho_solve((self.factor, True), b, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self.Ktilde.shape[0]))


def normalized_rbf(X, mask=None, name="genome") -> GramMatrix:
    """Gram matrix ``exp(-|x_i - x_j|^2 / max_lm |x_l - x_m|^2)``.

    Parameters
    ----------
    X : (n, p) array_like
    mask : sequence of int, optional
        Column subset the distances are computed on.
    name : str
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("normalized_rbf needs at least two rows")
    if mask is not None:
        mask = np.asarray(mask, dtype=int)
        if mask.size < 1:
            raise ValueError(f"kernel {name!r}: empty gene mask")
        X = X[:, mask]
    d2 = squareform(pdist(X, "sqeuclidean"))
    den = float(d2.max())
    if not den > 0:
        raise DegenerateKernelError(f"kernel {name!r}: all rows are identical")
    K = np.exp(-d2 / den)
    return GramMatrix(values=K, name=name, norm_denominator=den, mask=mask)


def pathway_stack(X, masks, include_complement=True, names=None) -> KernelStack:
    """One normalized RBF kernel per gene mask, plus one on the leftover genes."""
    X = np.asarray(X, dtype=float)
    masks = [np.asarray(m, dtype=int) for m in masks]
    if names is None:
        names = [f"pathway{i + 1}" for i in range(len(masks))]
    kernels = []
    for m, nm in zip(masks, names):
        if m.size == 0:
            raise ValueError(f"pathway {nm!r} has no genes")
        kernels.append(normalized_rbf(X, m, nm))
    if include_complement:
        used = np.unique(np.concatenate(masks)) if masks else np.array([], int)
        rest = np.setdiff1d(np.arange(X.shape[1]), used)
        if rest.size == 0:
            warnings.warn("complement gene set is empty; complement kernel skipped",
                          stacklevel=2)
        else:
            kernels.append(normalized_rbf(X, rest, "complement"))
    return KernelStack(tuple(kernels))


def combine(stack: KernelStack, sigma2) -> np.ndarray:
    """``sum_s sigma2[s] * k_s`` without the noise term."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != (len(stack),):
        raise ValueError(f"need {len(stack)} variance components, got {sigma2.shape}")
    K = np.zeros((stack.n, stack.n))
    for s2, k in zip(sigma2, stack):
        if s2 != 0.0:
            K += s2 * k.values
    return K


def factorize(K) -> tuple[np.ndarray, float]:
    """Cholesky factor with escalating diagonal jitter.

    Jitter starts at 1e-10 * trace/n and grows tenfold up to 1e-4 * trace/n.
    Returns ``(lower_factor, jitter_used)``.
    """
    n = K.shape[0]
    try:
        return cholesky(K, lower=True, check_finite=False), 0.0
    except LinAlgError:
        pass
    scale = np.trace(K) / n
    jitter = 1e-10 * scale
    while jitter <= 1e-4 * scale * (1 + 1e-12):
        try:
            L = cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            log.debug("cholesky needed jitter %.3g", jitter)
            return L, jitter
        except LinAlgError:
            jitter *= 10
    lam = eigvalsh(K, subset_by_index=[0, 0])[0]
    raise NumericalError(
        f"covariance not positive definite after jitter; smallest eigenvalue ~ {lam:.3g}"
    )


def assemble_covariance(stack: KernelStack, sigma2, noise2) -> CovarianceAssembly:
    """``Ktilde = sum_s sigma2[s] k_s + noise2 * I`` with its Cholesky factor."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if not noise2 > 0:
        raise ValueError("noise variance must be positive")
    if np.any(sigma2 < 0):
        raise ValueError("variance components must be nonnegative")
    K = combine(stack, sigma2)
    K[np.diag_indices_from(K)] += noise2
    L, jitter = factorize(K)
    if jitter:
        K[np.diag_indices_from(K)] += jitter
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return CovarianceAssembly(Ktilde=K, factor=L, log_det=log_det, jitter=jitter)


def cross_kernels(x_star, X, stack: KernelStack) -> np.ndarray:
    """Per-kernel cross Gram values, shape ``(M, m, n)`` for ``m`` test rows."""
    X = np.asarray(X, dtype=float)
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    if x_star.shape[1] != X.shape[1]:
        raise ValueError(
            f"test rows have {x_star.shape[1]} features, training has {X.shape[1]}"
        )
    if X.shape[0] != stack.n:
        raise ValueError("training matrix rows do not match the kernel stack")
    out = np.empty((len(stack), x_star.shape[0], X.shape[0]))
    for s, k in enumerate(stack):
        d2 = cdist(k.columns(x_star), k.columns(X), "sqeuclidean")
        out[s] = np.exp(-d2 / k.norm_denominator)
    return out


def cross_covariance(x_star, X, stack: KernelStack, sigma2) -> np.ndarray:
    """``K_*[j] = sum_s sigma2[s] exp(-|x_* - x_j|^2_s / den_s)``.

    Returns an ``n``-vector for a single test row, ``(m, n)`` for a batch.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    single = np.asarray(x_star).ndim == 1
    kx = cross_kernels(x_star, X, stack)
    out = np.tensordot(sigma2, kx, axes=1)
    return out[0] if single else out
