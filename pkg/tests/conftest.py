import numpy as np
import pytest

from gpaft.data import Partition
from gpaft.kernels import GramMatrix, KernelStack, normalized_rbf
from gpaft.mstep import CompletedData, ModelParams


def random_stack(rng, n, M, p=6):
    X = rng.standard_normal((n, p * M))
    grams = [normalized_rbf(X[:, s * p:(s + 1) * p], name=f"k{s}") for s in range(M)]
    return KernelStack(tuple(grams)), X


def random_completed(rng, n, s_r, frac_censored=0.4):
    n_c = max(1, int(round(frac_censored * n)))
    idx = rng.permutation(n)
    part = Partition(np.sort(idx[:n_c]), np.sort(idx[n_c:]))
    T_o = rng.normal(5.0, 1.0, size=part.n_o)
    draws = rng.normal(6.0, 1.0, size=(s_r, n_c))
    return CompletedData(T_o, part, draws)


def random_params(rng, q1, M):
    return ModelParams(rng.normal(size=q1), rng.uniform(0.2, 2.0, size=M),
                       float(rng.uniform(0.2, 1.0)))


def design(rng, n, q=2):
    return np.column_stack([np.ones(n), rng.standard_normal((n, q))])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def identity_gram(n, name="I"):
    return GramMatrix(np.eye(n), name, 1.0)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
