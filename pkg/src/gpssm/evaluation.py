"""Predictive metrics, the Kalman oracle and the sampling studies."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import jax
import jax.numpy as jnp
import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .errors import DegenerateR, DimensionMismatch, NumericalError
from .kernels import AffineMean
from .linalg import LOG_2PI, GaussianDist
from .model import GpssmModel, rollout_predict, sample_prior_trajectory
from .posteriors import PosteriorSpec, Variant, draw_noise, simulate

METRICS_COLUMNS = ("dataset", "variant", "nlpp", "rmse", "horizon", "n_samples", "seed", "wall_seconds")


# ---------------------------------------------------------------------------
# linear-Gaussian oracle


@dataclass(frozen=True)
class LinearGaussianSSM:
    """x_1 ~ initial; x_{t+1} = A x_t + N(0, Q); y_t = C x_t + d + N(0, R). Q and R may be full."""

    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    d: np.ndarray
    R: np.ndarray
    initial: GaussianDist

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        Q = _as_cov(self.Q, A.shape[0])
        R = _as_cov(self.R, C.shape[0])
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "d", np.broadcast_to(np.asarray(self.d, dtype=float), (C.shape[0],)).copy())


def _as_cov(M, n):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2:
        M = np.diag(np.broadcast_to(M, (n,)))
    return M


@dataclass(frozen=True)
class KalmanResult:
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    smoothed_means: np.ndarray
    smoothed_covs: np.ndarray
    log_marginal_likelihood: float


def kalman_filter_smoother(lin: LinearGaussianSSM, observations) -> KalmanResult:
    """Forward filter with exact log evidence, then the Rauch-Tung-Striebel backward pass."""
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    T, D = Y.shape[0], lin.A.shape[0]
    m_f = np.empty((T, D))
    P_f = np.empty((T, D, D))
    m_p = np.empty((T, D))
    P_p = np.empty((T, D, D))
    m, P = lin.initial.mean, lin.initial.cov.matrix
    ll = 0.0
    for t in range(T):
        m_p[t], P_p[t] = m, P
        innov = Y[t] - lin.C @ m - lin.d
        S = lin.C @ P @ lin.C.T + lin.R
        try:
            Ls = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise NumericalError(f"innovation covariance singular at t={t}") from None
        alpha = np.linalg.solve(Ls, innov)
        ll += -0.5 * (len(innov) * LOG_2PI + 2 * np.sum(np.log(np.diag(Ls))) + alpha @ alpha)
        K = np.linalg.solve(S, lin.C @ P).T
        m = m + K @ innov
        P = P - K @ lin.C @ P
        P = 0.5 * (P + P.T)
        m_f[t], P_f[t] = m, P
        m, P = lin.A @ m, lin.A @ P @ lin.A.T + lin.Q
    m_s = m_f.copy()
    P_s = P_f.copy()
    for t in range(T - 2, -1, -1):
        P_pred = lin.A @ P_f[t] @ lin.A.T + lin.Q
        G = np.linalg.solve(P_pred, lin.A @ P_f[t]).T
        m_s[t] = m_f[t] + G @ (m_s[t + 1] - lin.A @ m_f[t])
        P_s[t] = P_f[t] + G @ (P_s[t + 1] - P_pred) @ G.T
        P_s[t] = 0.5 * (P_s[t] + P_s[t].T)
    return KalmanResult(m_f, P_f, m_s, P_s, float(ll))


def dense_log_evidence(lin: LinearGaussianSSM, observations) -> float:
    """log p(Y) by assembling the joint Gaussian of all states and observations."""
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    T, D = Y.shape[0], lin.A.shape[0]
    # x = G w with w = (x_1, noise_2..T)
    G = np.zeros((T * D, T * D))
    for t in range(T):
        for s in range(t + 1):
            G[t * D : (t + 1) * D, s * D : (s + 1) * D] = np.linalg.matrix_power(lin.A, t - s)
    W = np.zeros((T * D, T * D))
    W[:D, :D] = lin.initial.cov.matrix
    for t in range(1, T):
        W[t * D : (t + 1) * D, t * D : (t + 1) * D] = lin.Q
    w_mean = np.zeros(T * D)
    w_mean[:D] = lin.initial.mean
    Sx = G @ W @ G.T
    mx = G @ w_mean
    H = np.kron(np.eye(T), lin.C)
    cov = H @ Sx @ H.T + np.kron(np.eye(T), lin.R)
    mean = H @ mx + np.tile(lin.d, T)
    return float(stats.multivariate_normal(mean, cov, allow_singular=False).logpdf(Y.reshape(-1)))


def gpssm_from_linear(lin: LinearGaussianSSM, n_inducing=3, kernel_variance=1e-8, seed=0) -> GpssmModel:
    """A GPSSM whose transition prior is (numerically) the deterministic map x -> A x."""
    D = lin.A.shape[0]
    if not np.allclose(lin.Q, np.diag(np.diag(lin.Q))) or not np.allclose(lin.R, np.diag(np.diag(lin.R))):
        raise ValueError("GPSSM noise covariances are diagonal")
    model = GpssmModel.create(
        D,
        obs_dim=lin.C.shape[0],
        n_inducing=n_inducing,
        Q=np.diag(lin.Q),
        C=lin.C,
        d=lin.d,
        R=np.diag(lin.R),
        px1_mean=lin.initial.mean,
        px1_cov=lin.initial.cov.matrix,
        variance=kernel_variance,
        seed=seed,
    )
    means = tuple(AffineMean.create(lin.A[i], 0.0) for i in range(D))
    return replace(model, mean_fns=means)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class PredictionMetrics:
    nlpp: float
    rmse: float
    horizon: int
    n_samples_used: int


def _check_pred(samples, observations):
    P = np.asarray(samples, dtype=float)
    Y = np.asarray(observations, dtype=float)
    if P.ndim == 2:
        P = P[..., None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if P.ndim != 3 or P.shape[1:] != Y.shape:
        raise DimensionMismatch(f"predictive samples {P.shape} do not match observations {Y.shape}")
    return P, Y


def nlpp(predictive_samples, observations, R) -> float:
    """Mean negative log mixture-of-Gaussians density per observation scalar.

    ``predictive_samples`` are emission means C x + d, shape (n, H, E); each
    sample contributes N(y_t; sample, diag R) with equal weight.
    """
    P, Y = _check_pred(predictive_samples, observations)
    R = np.broadcast_to(np.asarray(R, dtype=float), (Y.shape[1],))
    if np.any(R < 1e-12):
        raise DegenerateR(f"emission variance {R.min():.3e} is below 1e-12")
    n, H, E = P.shape
    if n < 1:
        raise ValueError("need at least one predictive sample")
    logp = -0.5 * np.sum(LOG_2PI + np.log(R) + (Y[None] - P) ** 2 / R, axis=-1)  # (n, H)
    mix = logsumexp(logp, axis=0) - np.log(n)
    return float(-np.sum(mix) / (H * E))


def rmse(predictive_samples, observations) -> float:
    P, Y = _check_pred(predictive_samples, observations)
    return float(np.sqrt(np.mean((P.mean(axis=0) - Y) ** 2)))


def prediction_start(model, spec: PosteriorSpec, dataset, n_samples, rng_seed=0):
    """Samples of q(x_T) with the whitened inducing draws each prediction should reuse.

    u-conditioned variants return the draw paired with each trajectory;
    the others return ``None`` so rollouts draw u afresh.
    """
    from .inference import _prepare

    Y, c = _prepare(model, spec, dataset)
    noise = draw_noise(jax.random.PRNGKey(rng_seed), n_samples, spec.T, model.latent_dim, model.num_inducing)
    out = jax.jit(simulate)(spec, model, c, noise)
    v = out["v"] if spec.variant.uses_u_draw and not spec.biased_independent_f else None
    return np.asarray(out["states"][:, -1]), v


def predict(model, spec, dataset, horizon, n_samples=1000, future_controls=None, rng_seed=0):
    """Emission-mean samples (n, horizon, E) rolled forward from the end of the training sequence.

    The controls driving step T -> T+1 are the last training control row
    followed by ``future_controls``.
    """
    x_T, v = prediction_start(model, spec, dataset, n_samples, rng_seed)
    c = None
    if model.control_dim:
        train_c = np.asarray(dataset.controls, dtype=float)
        if train_c.shape[0] >= spec.T:
            first = train_c[spec.T - 1 : spec.T]
        else:
            raise DimensionMismatch("controls must cover the last training step to roll forward")
        c = np.concatenate([first, np.asarray(future_controls, dtype=float)])[:horizon]
    return rollout_predict(model, x_T, c, horizon, n_samples, rng_seed + 1, u_draws=v)


def evaluate_predictions(samples, observations, R) -> PredictionMetrics:
    P, Y = _check_pred(samples, observations)
    return PredictionMetrics(nlpp(P, Y, R), rmse(P, Y), Y.shape[0], P.shape[0])


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k]) for k in METRICS_COLUMNS})


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationReport:
    z_scores: np.ndarray
    coverage: dict

    def summary(self):
        return {f"within_{k}sd": v for k, v in self.coverage.items()}


def calibration_from_samples(samples, true_states) -> CalibrationReport:
    """Per-t, per-dimension z-scores of the truth under the sample mean and std."""
    S = np.asarray(samples, dtype=float)
    X = np.asarray(true_states, dtype=float)
    if S.ndim == 2:
        S = S[..., None]
    if X.ndim == 1:
        X = X[:, None]
    if S.shape[1:] != X.shape:
        raise DimensionMismatch(f"samples {S.shape} do not match true states {X.shape}")
    mean = S.mean(axis=0)
    sd = S.std(axis=0, ddof=1) if S.shape[0] > 1 else np.zeros_like(mean)
    constant = np.all(S == S[0], axis=0)
    mean = np.where(constant, S[0], mean)
    sd = np.where(constant, 0.0, sd)
    diff = X - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, diff / np.where(sd > 0, sd, 1.0), np.where(np.abs(diff) == 0, 0.0, np.inf))
    coverage = {k: float(np.mean(np.abs(z) <= k)) for k in (1, 2, 3)}
    return CalibrationReport(z, coverage)


def calibration_report(model, spec, true_states, n_samples=1000, rng_seed=0, controls=None) -> CalibrationReport:
    noise = draw_noise(jax.random.PRNGKey(rng_seed), n_samples, spec.T, model.latent_dim, model.num_inducing)
    c = None if controls is None else jnp.asarray(controls, dtype=float)[: spec.T - 1]
    out = jax.jit(simulate)(spec, model, c, noise)
    return calibration_from_samples(np.asarray(out["states"]), true_states)


# ---------------------------------------------------------------------------
# sampling-bias study


def reference_bias_model(sigma_u_scale=1.0, n_inducing=15, Q=0.01, lengthscale=1.0):
    """1-D model with q(u) centred on a sine and covariance ``sigma_u_scale`` times K_ZZ."""
    Z = np.linspace(-3.0, 3.0, n_inducing)[:, None]
    model = GpssmModel.create(1, n_inducing=n_inducing, Z=Z, mean="zero", Q=Q, lengthscales=lengthscale)
    gp = model.gp(0)
    Lk = np.asarray(gp.Kzz_chol())
    v = np.linalg.solve(Lk, 2.0 * np.sin(Z[:, 0]))
    s = max(float(np.sqrt(sigma_u_scale)), 1e-150)
    from .linalg import unfill_lower

    gp = replace(gp, q_mu=jnp.asarray(v), q_sqrt_raw=unfill_lower(s * np.eye(n_inducing)))
    return model.with_gp(0, gp)


@dataclass(frozen=True)
class BiasReport:
    ks_statistics: np.ndarray
    p_values: np.ndarray
    alpha: float

    @property
    def rejected(self):
        return self.p_values < self.alpha

    @property
    def verdict(self):
        return "biased" if bool(self.rejected[-1]) else "indistinguishable"


def _prssm_states(model, T, n, seed, biased):
    spec = PosteriorSpec.create(Variant.PRSSM, T, model.latent_dim, biased_independent_f=biased)
    noise = draw_noise(jax.random.PRNGKey(seed), n, T, model.latent_dim, model.num_inducing)
    return np.asarray(jax.jit(simulate)(spec, model, None, noise)["states"])


def bias_study(model: GpssmModel, n_samples=10_000, T=10, rng_seed=0, alpha=0.01) -> BiasReport:
    """KS comparison of x_t marginals (first latent dimension) between coherent-u and per-step-u sampling.

    The two samplers use independent seeds so the test compares distributions.
    """
    coherent = _prssm_states(model, T, n_samples, rng_seed, False)
    biased = _prssm_states(model, T, n_samples, rng_seed + 1, True)
    ks = np.empty(T)
    pv = np.empty(T)
    for t in range(T):
        res = stats.ks_2samp(coherent[:, t, 0], biased[:, t, 0])
        ks[t], pv[t] = res.statistic, res.pvalue
    return BiasReport(ks, pv, alpha)


# ---------------------------------------------------------------------------
# timing study


def timing_model(n_inducing=20, seed=0):
    return GpssmModel.create(1, n_inducing=n_inducing, Q=0.01, Z=np.linspace(-3, 3, n_inducing)[:, None], seed=seed)


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def timing_study(lengths=(100, 400), repeats=5, n_trajectories=100, model=None) -> dict:
    """Median wall times per sequence length for the exact prior samplers and the VCDT sampler.

    ``prior_seconds`` times ``sample_prior_trajectory(method="compiled")``;
    ``prior_incremental_seconds`` times the eager sequential method, whose
    cost at these lengths is dominated by per-step interpreter overhead.
    Compiled functions are warmed up before timing; ``n_trajectories``
    applies to the VCDT sampler; a batch keeps its timings clear of the
    fixed per-call dispatch cost.
    """
    model = timing_model() if model is None else model
    sim = jax.jit(simulate)
    out = {"T": list(lengths), "prior_seconds": [], "prior_incremental_seconds": [], "vcdt_seconds": []}
    for T in lengths:
        sample_prior_trajectory(model, T=T, rng_seed=0, method="compiled")
        out["prior_seconds"].append(
            _median_time(lambda: sample_prior_trajectory(model, T=T, rng_seed=123, method="compiled"), repeats)
        )
        out["prior_incremental_seconds"].append(
            _median_time(lambda: sample_prior_trajectory(model, T=T, rng_seed=123), repeats)
        )
        spec = PosteriorSpec.create(Variant.VCDT, T, model.latent_dim, A=np.eye(model.latent_dim), S=np.asarray(model.Q))
        noise = draw_noise(jax.random.PRNGKey(0), n_trajectories, T, model.latent_dim, model.num_inducing)
        jax.block_until_ready(sim(spec, model, None, noise))
        out["vcdt_seconds"].append(
            _median_time(lambda: jax.block_until_ready(sim(spec, model, None, noise)), repeats)
        )
    if len(lengths) >= 2:
        for key in ("prior", "prior_incremental", "vcdt"):
            col = out[f"{key}_seconds"]
            out[f"{key}_ratio"] = col[-1] / col[0]
    return out
