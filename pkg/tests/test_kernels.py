import math
import warnings

import numpy as np
import pytest
from conftest import random_stack
from scipy.stats import ortho_group

from gpaft.errors import DegenerateKernelError
from gpaft.kernels import (GramMatrix, KernelStack, assemble_covariance, cross_covariance,
                           normalized_rbf, pathway_stack)


def brute_rbf(X):
    n = len(X)
    d2 = np.array([[np.sum((X[i] - X[j]) ** 2) for j in range(n)] for i in range(n)])
    return np.exp(-d2 / d2.max())


class TestNormalizedRbf:
    def test_unit_diagonal_and_max_pair(self, rng):
        X = rng.standard_normal((7, 4))
        K = normalized_rbf(X).values
        np.testing.assert_array_equal(np.diag(K), 1.0)
        assert K.min() == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_brute_force(self, rng):
        X = rng.standard_normal((4, 3))
        np.testing.assert_allclose(normalized_rbf(X).values, brute_rbf(X), atol=1e-12)

    def test_mask(self, rng):
        X = rng.standard_normal((5, 6))
        g = normalized_rbf(X, mask=[1, 4])
        np.testing.assert_allclose(g.values, brute_rbf(X[:, [1, 4]]), atol=1e-12)

    def test_identical_rows_rejected(self):
        with pytest.raises(DegenerateKernelError):
            normalized_rbf(np.ones((3, 2)))

    def test_psd_and_range(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 40))
            K = normalized_rbf(rng.standard_normal((n, 5))).values
            assert np.linalg.eigvalsh(K).min() >= -1e-8 * n
            assert np.all(K > 0) and np.all(K <= 1)
            np.testing.assert_array_equal(K, K.T)

    def test_rotation_invariance(self, rng):
        X = rng.standard_normal((6, 4))
        Q = ortho_group.rvs(4, random_state=1)
        np.testing.assert_allclose(normalized_rbf(X @ Q).values, normalized_rbf(X).values,
                                   atol=1e-12)


class TestPathwayStack:
    def test_single_full_mask_matches_genome(self, rng):
        X = rng.standard_normal((5, 4))
        st = pathway_stack(X, [np.arange(4)], include_complement=False)
        np.testing.assert_array_equal(st[0].values, normalized_rbf(X).values)

    def test_empty_complement_skipped(self, rng):
        X = rng.standard_normal((5, 4))
        with pytest.warns(UserWarning, match="complement"):
            st = pathway_stack(X, [[0, 1], [2, 3]], include_complement=True)
        assert len(st) == 2

    def test_six_sets_plus_complement(self, rng):
        X = rng.standard_normal((8, 700))
        perm = rng.permutation(700)
        cuts = np.cumsum([0, 150, 150, 100, 100, 50, 50])
        masks = [perm[a:b] for a, b in zip(cuts[:-1], cuts[1:])]
        st = pathway_stack(X, masks)
        assert len(st) == 7 and st.names[-1] == "complement"
        np.testing.assert_array_equal(np.sort(st[-1].mask), np.sort(perm[600:]))

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(ValueError):
            pathway_stack(rng.standard_normal((4, 3)), [[]])


class TestAssemble:
    def test_zero_sigma(self, rng):
        st, _ = random_stack(rng, 6, 2)
        cov = assemble_covariance(st, [0.0, 0.0], 0.7)
        np.testing.assert_array_equal(cov.Ktilde, 0.7 * np.eye(6))
        assert cov.log_det == pytest.approx(6 * math.log(0.7), rel=1e-12)

    def test_identity_gram(self):
        st = KernelStack((GramMatrix(np.eye(4), "I", 1.0),))
        cov = assemble_covariance(st, [1.5], 0.5)
        np.testing.assert_array_equal(cov.Ktilde, 2.0 * np.eye(4))

    def test_log_det_eigen_oracle(self, rng):
        st, _ = random_stack(rng, 12, 2)
        cov = assemble_covariance(st, [0.5, 1.5], 0.3)
        K = 0.5 * st[0].values + 1.5 * st[1].values + 0.3 * np.eye(12)
        np.testing.assert_allclose(cov.log_det, np.sum(np.log(np.linalg.eigvalsh(K))),
                                   rtol=0, atol=1e-8)

    def test_solve_round_trip(self, rng):
        st, _ = random_stack(rng, 15, 3)
        cov = assemble_covariance(st, [1.0, 0.2, 3.0], 0.05)
        b = rng.standard_normal(15)
        back = cov.Ktilde @ cov.solve(b)
        assert np.linalg.norm(back - b) <= 1e-8 * np.linalg.norm(b)

    def test_zero_component_bit_identical(self, rng):
        st, _ = random_stack(rng, 8, 1)
        extra = random_stack(rng, 8, 1)[0][0]
        a = assemble_covariance(st, [1.3], 0.4)
        b = assemble_covariance(st.with_kernel(extra), [1.3, 0.0], 0.4)
        np.testing.assert_array_equal(a.Ktilde, b.Ktilde)
        np.testing.assert_array_equal(a.factor, b.factor)

    def test_jitter_rescues_singular(self):
        # rank-one kernel with a negligible noise term
        st = KernelStack((GramMatrix(np.ones((5, 5)), "ones", 1.0),))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cov = assemble_covariance(st, [1.0], 1e-300)
        assert np.isfinite(cov.log_det) and cov.jitter > 0


class TestCrossCovariance:
    def test_training_point(self, rng):
        X = rng.standard_normal((6, 3))
        st = KernelStack((normalized_rbf(X),))
        k = cross_covariance(X[2], X, st, [2.5])
        assert k[2] == pytest.approx(2.5, abs=1e-14)
        np.testing.assert_allclose(k, 2.5 * st[0].values[2], atol=1e-12)

    def test_zero_sigma(self, rng):
        X = rng.standard_normal((6, 3))
        st = KernelStack((normalized_rbf(X),))
        np.testing.assert_array_equal(cross_covariance(rng.standard_normal(3), X, st, [0.0]), 0.0)

    def test_brute_force_two_kernels(self, rng):
        X = rng.standard_normal((7, 6))
        st = pathway_stack(X, [[0, 1, 2], [3, 4]], include_complement=False)
        x = rng.standard_normal(6)
        got = cross_covariance(x, X, st, [0.4, 1.7])
        want = np.zeros(7)
        for s2, g in zip([0.4, 1.7], st):
            m = g.mask
            d2 = np.sum((X[:, m] - x[m]) ** 2, axis=1)
            want += s2 * np.exp(-d2 / g.norm_denominator)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_uses_training_denominator(self, rng):
        X = rng.standard_normal((5, 2))
        st = KernelStack((normalized_rbf(X),))
        far = X[0] + 100.0
        k = cross_covariance(far, X, st, [1.0])
        assert np.all(k < 1e-10)

    def test_dimension_mismatch(self, rng):
        X = rng.standard_normal((5, 2))
        st = KernelStack((normalized_rbf(X),))
        with pytest.raises(ValueError):
            cross_covariance(np.zeros(3), X, st, [1.0])
