import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpssm.errors import AsymmetricInput, DimensionMismatch, NotFactorizable
from gpssm.linalg import (
    GaussianDist,
    PsdMatrix,
    cholesky,
    fill_lower,
    gaussian_kl,
    gaussian_log_density,
    inv_softplus,
    kl_chol,
    kl_to_diag,
    kl_to_standard,
    mvn_logpdf_chol,
    softplus,
    tri_solve,
    unfill_lower,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def spd_from(M):
    return M @ M.T + np.eye(M.shape[0])


def gauss(mean, cov):
    return GaussianDist.from_cov(np.atleast_1d(mean), np.atleast_2d(cov))


class TestCholesky:
    def test_identity(self):
        L = cholesky(np.eye(2))
        np.testing.assert_array_equal(L.lower_factor, np.eye(2))
        assert L.jitter_used == 0.0

    def test_hand_factor(self):
        L = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(L.lower_factor, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], atol=1e-15)
        np.testing.assert_allclose(L.matrix, [[4.0, 2.0], [2.0, 3.0]], atol=1e-15)
        assert L.jitter_used == 0.0

    def test_zero_matrix_takes_first_jitter_step(self):
        L = cholesky(np.zeros((2, 2)))
        assert L.jitter_used == 1e-10
        np.testing.assert_allclose(L.lower_factor, math.sqrt(1e-10) * np.eye(2), rtol=1e-14)

    def test_negative_definite_exhausts_schedule(self):
        with pytest.raises(NotFactorizable):
            cholesky(-np.eye(3))

    def test_asymmetric_rejected(self):
        with pytest.raises(AsymmetricInput):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_small_asymmetry_tolerated(self):
        A = np.array([[2.0, 0.5], [0.5 + 5e-11, 2.0]])
        assert cholesky(A).jitter_used == 0.0

    @given(arrays(float, (4, 4), elements=finite))
    def test_reconstruction(self, M):
        A = spd_from(M)
        L = cholesky(A)
        assert L.jitter_used == 0.0
        assert np.all(np.diag(L.lower_factor) > 0)
        assert np.linalg.norm(L.matrix - A) <= 1e-10 * np.linalg.norm(A)
        R = L.matrix
        assert np.abs(R - R.T).max() <= 1e-12 * np.abs(R).max()


class TestTriSolve:
    def test_identity(self):
        v = np.array([1.5, -2.0])
        np.testing.assert_array_equal(tri_solve(cholesky(np.eye(2)), v), v)

    def test_diagonal(self):
        np.testing.assert_allclose(tri_solve(cholesky(np.diag([4.0, 9.0])), np.array([8.0, 27.0])), [2.0, 3.0])

    def test_residual(self):
        A = np.array([[4.0, 2.0], [2.0, 3.0]])
        rhs = np.array([6.0, 5.0])
        x = tri_solve(cholesky(A), rhs)
        assert np.abs(A @ x - rhs).max() <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            tri_solve(cholesky(np.eye(2)), np.ones(3))

    @given(arrays(float, (5, 5), elements=finite), arrays(float, (5, 2), elements=finite))
    def test_residual_property(self, M, rhs):
        A = spd_from(M)
        if np.linalg.cond(A) >= 1e6:
            return
        x = tri_solve(cholesky(A), rhs)
        assert np.linalg.norm(A @ x - rhs) <= 1e-10 * max(np.linalg.norm(rhs), 1e-300) + 1e-300


class TestLogDensity:
    def test_standard_scalar_at_zero(self):
        assert gaussian_log_density(np.zeros(1), GaussianDist.standard(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
        assert gaussian_log_density(np.zeros(1), GaussianDist.standard(1)) == pytest.approx(-0.918938533204672, abs=1e-14)

    def test_at_mean(self):
        m = np.array([1.0, -2.0, 0.5])
        dist = GaussianDist(m, PsdMatrix(np.eye(3)))
        assert gaussian_log_density(m, dist) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)

    def test_variance_four(self):
        val = gaussian_log_density(np.array([1.0]), gauss(0.0, 4.0))
        assert val == pytest.approx(-0.5 * math.log(8 * math.pi) - 1 / 8, abs=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            gaussian_log_density(np.zeros(2), GaussianDist.standard(3))

    def test_matches_scipy(self, rng):
        from scipy.stats import multivariate_normal

        A = rng.standard_normal((3, 3))
        cov = A @ A.T + np.eye(3)
        m = rng.standard_normal(3)
        x = rng.standard_normal(3)
        ref = multivariate_normal(m, cov).logpdf(x)
        assert gaussian_log_density(x, gauss(m, cov)) == pytest.approx(ref, abs=1e-12)
        L = np.linalg.cholesky(cov)
        assert float(mvn_logpdf_chol(x, m, L)) == pytest.approx(ref, abs=1e-12)


class TestKL:
    def test_identical(self):
        assert gaussian_kl(GaussianDist.standard(2), GaussianDist.standard(2)) == 0.0

    def test_mean_shift(self):
        assert gaussian_kl(gauss(1.0, 1.0), gauss(0.0, 1.0)) == pytest.approx(0.5, abs=1e-15)

    def test_variance_ratio(self):
        assert gaussian_kl(gauss(0.0, 4.0), gauss(0.0, 1.0)) == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-14)
        assert gaussian_kl(gauss(0.0, 4.0), gauss(0.0, 1.0)) == pytest.approx(0.80685, abs=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            gaussian_kl(GaussianDist.standard(2), GaussianDist.standard(3))

    @given(
        arrays(float, (3, 3), elements=finite),
        arrays(float, (3, 3), elements=finite),
        arrays(float, 3, elements=finite),
        arrays(float, 3, elements=finite),
    )
    def test_non_negative_and_zero_iff_equal(self, Mq, Mp, mq, mp):
        q = gauss(mq, spd_from(Mq))
        p = gauss(mp, spd_from(Mp))
        assert gaussian_kl(q, p) >= 0.0
        assert gaussian_kl(q, q) <= 1e-12

    def test_monte_carlo(self, rng):
        q = gauss(0.3 * rng.standard_normal(3), spd_from(0.2 * rng.standard_normal((3, 3))))
        p = gauss(0.3 * rng.standard_normal(3), spd_from(0.2 * rng.standard_normal((3, 3))))
        from scipy.stats import multivariate_normal

        # antithetic pairs: 10^6 draws in total, the odd part of log q - log p cancels
        eps = rng.standard_normal((500_000, 3)) @ q.cov.lower_factor.T
        x = np.concatenate([q.mean + eps, q.mean - eps])
        ratio = multivariate_normal(q.mean, q.cov.matrix).logpdf(x) - multivariate_normal(p.mean, p.cov.matrix).logpdf(x)
        pair = 0.5 * (ratio[:500_000] + ratio[500_000:])
        se = pair.std(ddof=1) / np.sqrt(pair.size)
        assert 3 * se < 1e-3
        assert abs(pair.mean() - gaussian_kl(q, p)) < 1e-3

    def test_traceable_versions_agree(self, rng):
        A, B = spd_from(rng.standard_normal((3, 3))), spd_from(rng.standard_normal((3, 3)))
        mq, mp = rng.standard_normal(3), rng.standard_normal(3)
        Lq, Lp = np.linalg.cholesky(A), np.linalg.cholesky(B)
        ref = gaussian_kl(gauss(mq, A), gauss(mp, B))
        assert float(kl_chol(mq, Lq, mp, Lp)) == pytest.approx(ref, rel=1e-12)
        d = np.array([0.3, 1.2, 2.0])
        ref_diag = gaussian_kl(gauss(mq, A), gauss(mp, np.diag(d)))
        assert float(kl_to_diag(mq, Lq, mp, d)) == pytest.approx(ref_diag, rel=1e-12)
        ref_std = gaussian_kl(gauss(mq, A), GaussianDist.standard(3))
        assert float(kl_to_standard(mq, Lq)) == pytest.approx(ref_std, rel=1e-12)


class TestParameterMaps:
    @given(st.floats(1e-6, 1e3))
    def test_softplus_roundtrip(self, y):
        assert float(softplus(inv_softplus(y))) == pytest.approx(y, rel=1e-10)

    def test_softplus_exact_points(self):
        assert float(softplus(inv_softplus(1.0))) == 1.0
        assert float(softplus(inv_softplus(0.0))) == 0.0

    @given(arrays(float, (3, 3), elements=finite))
    def test_fill_roundtrip(self, M):
        L = np.tril(M, -1) + np.diag(np.abs(np.diag(M)) + 0.1)
        np.testing.assert_allclose(np.asarray(fill_lower(unfill_lower(L))), L, rtol=1e-10, atol=1e-12)
