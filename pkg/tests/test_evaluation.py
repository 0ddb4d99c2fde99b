import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gpssm.errors import DegenerateR, DimensionMismatch
from gpssm.evaluation import (
    LinearGaussianSSM,
    _prssm_states,
    bias_study,
    calibration_from_samples,
    calibration_report,
    dense_log_evidence,
    evaluate_predictions,
    kalman_filter_smoother,
    nlpp,
    predict,
    reference_bias_model,
    rmse,
    timing_study,
    write_metrics,
)
from gpssm.linalg import GaussianDist
from gpssm.model import GpssmModel
from gpssm.posteriors import PosteriorSpec, sample_posterior


def random_lgssm(r, D, E):
    return LinearGaussianSSM(
        A=r.standard_normal((D, D)) / np.sqrt(D),
        Q=np.diag(r.uniform(0.05, 1.0, D)),
        C=r.standard_normal((E, D)),
        d=r.standard_normal(E),
        R=np.diag(r.uniform(0.1, 1.0, E)),
        initial=GaussianDist.from_cov(r.standard_normal(D), np.diag(r.uniform(0.2, 2.0, D))),
    )


class TestKalman:
    def test_single_observation(self):
        m0, P0 = np.array([0.5, -1.0]), np.array([[1.0, 0.3], [0.3, 2.0]])
        lin = LinearGaussianSSM(np.eye(2), 1e-300, np.eye(2), 0.0, 1.0, GaussianDist.from_cov(m0, P0))
        y = np.array([[1.2, 0.4]])
        expected = stats.multivariate_normal(m0, P0 + np.eye(2)).logpdf(y[0])
        assert kalman_filter_smoother(lin, y).log_marginal_likelihood == pytest.approx(expected, abs=1e-12)

    def test_static_state_fuses_observations(self):
        Y = np.array([[1.0], [3.0], [-1.0], [0.5]])
        lin = LinearGaussianSSM([[1.0]], 1e-300, [[1.0]], 0.0, 1.0, GaussianDist.from_cov([0.0], [[4.0]]))
        res = kalman_filter_smoother(lin, Y)
        w = np.r_[1 / 4.0, np.ones(4)]
        expected = np.sum(w * np.r_[0.0, Y[:, 0]]) / w.sum()
        np.testing.assert_allclose(res.smoothed_means[:, 0], expected, atol=1e-8)
        np.testing.assert_allclose(res.smoothed_covs[:, 0, 0], 1 / w.sum(), atol=1e-8)

    def test_dense_agreement_fixed(self, rng):
        lin = random_lgssm(rng, 1, 1)
        Y = rng.standard_normal((4, 1))
        assert kalman_filter_smoother(lin, Y).log_marginal_likelihood == pytest.approx(
            dense_log_evidence(lin, Y), abs=1e-9
        )

    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.integers(1, 6))
    def test_dense_agreement(self, seed, D, E, T):
        r = np.random.default_rng(seed)
        lin = random_lgssm(r, D, E)
        Y = r.standard_normal((T, E))
        res = kalman_filter_smoother(lin, Y)
        assert res.log_marginal_likelihood == pytest.approx(dense_log_evidence(lin, Y), abs=1e-9)
        for P in np.concatenate([res.filtered_covs, res.smoothed_covs]):
            assert np.linalg.eigvalsh(P).min() > -1e-12

    def test_smoother_matches_dense_posterior(self, rng):
        lin = random_lgssm(rng, 2, 1)
        Y = rng.standard_normal((3, 1))
        res = kalman_filter_smoother(lin, Y)
        # dense posterior of the stacked states
        G = np.block([[np.linalg.matrix_power(lin.A, t - s) if s <= t else np.zeros((2, 2)) for s in range(3)] for t in range(3)])
        W = np.zeros((6, 6))
        W[:2, :2] = lin.initial.cov.matrix
        W[2:4, 2:4] = W[4:, 4:] = lin.Q
        Sx, mx = G @ W @ G.T, G @ np.r_[lin.initial.mean, np.zeros(4)]
        H = np.kron(np.eye(3), lin.C)
        Syy = H @ Sx @ H.T + np.kron(np.eye(3), lin.R)
        K = Sx @ H.T @ np.linalg.inv(Syy)
        post_m = mx + K @ (Y.reshape(-1) - H @ mx - np.tile(lin.d, 3))
        post_S = Sx - K @ H @ Sx
        np.testing.assert_allclose(res.smoothed_means.reshape(-1), post_m, atol=1e-9)
        for t in range(3):
            np.testing.assert_allclose(res.smoothed_covs[t], post_S[2 * t : 2 * t + 2, 2 * t : 2 * t + 2], atol=1e-9)


class TestMetrics:
    def test_nlpp_at_truth(self):
        assert nlpp(np.full((5, 1, 1), 0.3), [[0.3]], 1.0) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_nlpp_duplicates_and_order(self, rng):
        P = rng.standard_normal((7, 4, 2))
        Y = rng.standard_normal((4, 2))
        base = nlpp(P, Y, [0.5, 1.5])
        assert nlpp(np.concatenate([P, P]), Y, [0.5, 1.5]) == pytest.approx(base, abs=1e-12)
        assert nlpp(P[::-1], Y, [0.5, 1.5]) == pytest.approx(base, abs=1e-12)
        assert rmse(P[::-1], Y) == pytest.approx(rmse(P, Y), abs=1e-12)

    def test_nlpp_two_component_mixture(self):
        a, y, R = 0.8, 1.0, 0.5
        P = np.array([[[y - a]], [[y + a]]])
        hand = -math.log(0.5 * (stats.norm.pdf(y, y - a, math.sqrt(R)) + stats.norm.pdf(y, y + a, math.sqrt(R))))
        assert nlpp(P, [[y]], R) == pytest.approx(hand, abs=1e-12)
        assert nlpp(P, [[y]], R) > nlpp(np.array([[[y]]]), [[y]], R)

    def test_nlpp_degenerate_noise(self):
        with pytest.raises(DegenerateR):
            nlpp(np.zeros((2, 1, 2)), np.zeros((1, 2)), [1.0, 1e-13])

    def test_rmse_cases(self, rng):
        Y = rng.standard_normal((6, 3))
        assert rmse(np.tile(Y, (4, 1, 1)), Y) == 0.0
        assert rmse(np.tile(Y + 0.25, (4, 1, 1)), Y) == pytest.approx(0.25, abs=1e-15)
        one = rng.standard_normal((1, 6, 3))
        assert rmse(one, Y) == pytest.approx(np.sqrt(np.mean((one[0] - Y) ** 2)), abs=1e-15)
        with pytest.raises(DimensionMismatch):
            rmse(one, Y[:, :2])

    def test_metrics_csv(self, tmp_path):
        m = evaluate_predictions(np.zeros((3, 2, 1)), np.zeros((2, 1)), 1.0)
        row = dict(dataset="kink", variant="vcdt", nlpp=m.nlpp, rmse=m.rmse, horizon=m.horizon,
                   n_samples=m.n_samples_used, seed=0, wall_seconds=1.5)
        write_metrics(tmp_path / "m.csv", [row])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "dataset,variant,nlpp,rmse,horizon,n_samples,seed,wall_seconds"
        assert lines[1].startswith("kink,vcdt,")

    def test_predict_shape(self):
        model = GpssmModel.create(2, obs_dim=1, C=[[1.0, 0.0]], n_inducing=4)
        spec = PosteriorSpec.create("vcdt", 5, 2)
        P = predict(model, spec, np.zeros((5, 1)), horizon=3, n_samples=11)
        assert P.shape == (11, 3, 1) and np.all(np.isfinite(P))


class TestCalibration:
    def test_point_mass(self, rng):
        X = rng.standard_normal((10, 2))
        rep = calibration_from_samples(np.tile(X, (5, 1, 1)), X)
        assert np.all(rep.z_scores == 0) and rep.coverage[1] == 1.0

    def test_calibrated_gaussian(self, rng):
        T, n = 120, 2000
        mu, sd = rng.standard_normal(T), rng.uniform(0.2, 2.0, T)
        truth = mu + sd * rng.standard_normal(T)
        samples = mu + sd * rng.standard_normal((n, T))
        assert 0.95 <= calibration_from_samples(samples, truth).coverage[3] <= 1.0

    def test_overconfidence_detected(self, rng):
        T, n = 120, 2000
        truth = rng.standard_normal(T)
        samples = 0.5 * rng.standard_normal((n, T))
        assert calibration_from_samples(samples, truth).coverage[1] < 0.683

    def test_own_predictive_nominal(self):
        model = GpssmModel.create(1, n_inducing=5, Q=0.05)
        spec = PosteriorSpec.create("factorised_linear", 60, 1, A=[[0.8]], b=[0.1], S=[0.2])
        hits = {1: 0, 2: 0, 3: 0}
        reps = 20
        for k in range(reps):
            truth = sample_posterior(spec, model, rng_seed=1000 + k).states
            cov = calibration_report(model, spec, truth, n_samples=2000, rng_seed=k).coverage
            for j in hits:
                hits[j] += cov[j] * 60
        N = 60 * reps
        for j, p in zip((1, 2, 3), (0.6827, 0.9545, 0.9973)):
            lo, hi = stats.binom.interval(0.99, N, p)
            # trajectories are autocorrelated, so allow a factor-2 wider band
            half = (hi - lo) / 2
            assert abs(hits[j] - N * p) <= 2 * half + 1


class TestBiasStudy:
    def test_degenerate_qu_indistinguishable(self):
        rep = bias_study(reference_bias_model(sigma_u_scale=0.0), n_samples=10_000, T=10)
        assert not rep.rejected[-1] and rep.verdict == "indistinguishable"

    def test_two_steps_coincide(self):
        model = reference_bias_model(1.0)
        a = _prssm_states(model, 2, 10_000, 0, False)
        b = _prssm_states(model, 2, 10_000, 0, True)
        np.testing.assert_array_equal(a[:, 0], b[:, 0])
        assert bias_study(model, n_samples=10_000, T=2).p_values[-1] > 0.01

    def test_large_sigma_u_rejected(self):
        rep = bias_study(reference_bias_model(1.0), n_samples=10_000, T=10)
        assert rep.rejected[-1] and rep.verdict == "biased"
        assert rep.ks_statistics.shape == (10,)


def test_timing_study_keys():
    out = timing_study(lengths=(10, 20), repeats=1)
    assert set(out) >= {"T", "prior_seconds", "vcdt_seconds", "prior_ratio", "vcdt_ratio"}
    assert all(t > 0 for t in out["vcdt_seconds"])
