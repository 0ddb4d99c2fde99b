"""The generative GPSSM: initial state, GP transitions, process noise and linear-Gaussian emissions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np

from .errors import DimensionMismatch
from .kernels import (
    DEFAULT_JITTER,
    DUPLICATE_TOL,
    ConditioningState,
    IdentityMean,
    Linear,
    SparseGP,
    SquaredExponentialARD,
    ZeroMean,
)
from .linalg import (
    GaussianDist,
    PsdMatrix,
    fill_lower,
    inv_softplus,
    softplus,
    unfill_lower,
)

pytree = jax.tree_util.register_dataclass


def rng_streams(seed, n):
    """Independent numpy generators spawned from one seed, in a fixed order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@pytree
@dataclass(frozen=True)
class EmissionModel:
    """y_t | x_t ~ N(C x_t + d, diag(R))."""

    C: jax.Array
    d: jax.Array
    raw_R: jax.Array

    @classmethod
    def create(cls, C, d=None, R=None):
        C = jnp.atleast_2d(jnp.asarray(C, dtype=float))
        E = C.shape[0]
        d = jnp.zeros(E) if d is None else jnp.asarray(d, dtype=float).reshape(E)
        R = jnp.ones(E) if R is None else jnp.broadcast_to(jnp.asarray(R, dtype=float), (E,))
        return cls(C, d, inv_softplus(R))

    @property
    def R(self):
        return softplus(self.raw_R)

    @property
    def obs_dim(self):
        return self.C.shape[0]

    def mean(self, X):
        return X @ self.C.T + self.d

    def log_prob(self, Y, X):
        R = self.R
        diff = Y - self.mean(X)
        return -0.5 * jnp.sum(jnp.log(2 * jnp.pi * R) + diff**2 / R, axis=-1)


@pytree
@dataclass(frozen=True)
class GpssmModel:
    """x_1 ~ N(mu_p1, Sigma_p1); x_{t+1} | f, x_t ~ N(f(x_t, c_t), diag(Q)); y_t ~ emission.

    Each latent dimension d has an independent sparse GP. ``Z`` is either one
    (M, D + D_c) array shared by all dimensions or a (D, M, D + D_c) stack.
    """

    kernels: tuple
    mean_fns: tuple
    Z: jax.Array
    q_mu: jax.Array
    q_sqrt_raw: jax.Array
    raw_Q: jax.Array
    emission: EmissionModel
    px1_mean: jax.Array
    px1_chol_raw: jax.Array
    control_dim: int = field(default=0, metadata=dict(static=True))
    jitter: float = field(default=DEFAULT_JITTER, metadata=dict(static=True))

    @classmethod
    def create(
        cls,
        latent_dim,
        obs_dim=None,
        control_dim=0,
        n_inducing=20,
        kernel="se",
        mean="identity",
        Z=None,
        shared_Z=True,
        Q=0.01,
        C=None,
        d=None,
        R=1.0,
        px1_mean=None,
        px1_cov=None,
        variance=1.0,
        lengthscales=1.0,
        jitter=DEFAULT_JITTER,
        seed=0,
    ):
        D = latent_dim
        E = D if obs_dim is None else obs_dim
        D_in = D + control_dim
        if C is None:
            C = np.zeros((E, D))
            k = min(D, E)
            C[:k, :k] = np.eye(k)
        if Z is None:
            rng = np.random.default_rng(seed)
            shape = (n_inducing, D_in) if shared_Z else (D, n_inducing, D_in)
            Z = rng.standard_normal(shape)
        Z = jnp.asarray(Z, dtype=float)
        M = Z.shape[-2]
        kernels = tuple(_make_kernel(kernel, D_in, variance, lengthscales) for _ in range(D))
        mean_fns = tuple(_make_mean(mean, d_) for d_ in range(D))
        px1_mean = jnp.zeros(D) if px1_mean is None else jnp.asarray(px1_mean, dtype=float)
        px1_cov = np.eye(D) if px1_cov is None else np.atleast_2d(np.asarray(px1_cov, dtype=float))
        return cls(
            kernels=kernels,
            mean_fns=mean_fns,
            Z=Z,
            q_mu=jnp.zeros((D, M)),
            q_sqrt_raw=unfill_lower(jnp.tile(jnp.eye(M), (D, 1, 1))),
            raw_Q=inv_softplus(jnp.broadcast_to(jnp.asarray(Q, dtype=float), (D,))),
            emission=EmissionModel.create(C, d, R),
            px1_mean=px1_mean,
            px1_chol_raw=unfill_lower(np.linalg.cholesky(px1_cov)),
            control_dim=control_dim,
            jitter=jitter,
        )

    @property
    def latent_dim(self):
        return self.q_mu.shape[0]

    @property
    def input_dim(self):
        return self.latent_dim + self.control_dim

    @property
    def num_inducing(self):
        return self.q_mu.shape[1]

    @property
    def shared_Z(self):
        return self.Z.ndim == 2

    @property
    def Q(self):
        return softplus(self.raw_Q)

    @property
    def px1_chol(self):
        return fill_lower(self.px1_chol_raw)

    @property
    def initial_state(self) -> GaussianDist:
        return GaussianDist(np.asarray(self.px1_mean), PsdMatrix(np.asarray(self.px1_chol)))

    def Z_of(self, d):
        return self.Z if self.shared_Z else self.Z[d]

    def gp(self, d) -> SparseGP:
        return SparseGP(
            self.kernels[d], self.mean_fns[d], self.Z_of(d), self.q_mu[d], self.q_sqrt_raw[d], self.jitter
        )

    @property
    def transition_gps(self):
        return tuple(self.gp(d) for d in range(self.latent_dim))

    def with_gp(self, d, gp: SparseGP) -> "GpssmModel":
        """Replace dimension ``d``'s kernel, mean and q(u); Z is replaced too when not shared."""
        kernels = list(self.kernels)
        means = list(self.mean_fns)
        kernels[d] = gp.kernel
        means[d] = gp.mean_fn
        Z = gp.Z if self.shared_Z else self.Z.at[d].set(gp.Z)
        return replace(
            self,
            kernels=tuple(kernels),
            mean_fns=tuple(means),
            Z=Z,
            q_mu=self.q_mu.at[d].set(gp.q_mu),
            q_sqrt_raw=self.q_sqrt_raw.at[d].set(gp.q_sqrt_raw),
        )

    def Kzz_chols(self):
        return [self.gp(d).Kzz_chol() for d in range(self.latent_dim)]

    def kl_u(self):
        return sum(self.gp(d).kl() for d in range(self.latent_dim))

    def q_sqrt(self):
        return fill_lower(self.q_sqrt_raw)

    def project(self, Xin, chols):
        """Per-dimension whitened projections of inputs ``Xin`` (n, D_in).

        Returns ``a`` (D, M, n), prior means (D, n) and conditional variances (D, n).
        """
        out = [self.gp(d).project(Xin, chols[d]) for d in range(self.latent_dim)]
        a = jnp.stack([o[0] for o in out])
        m = jnp.stack([o[1] for o in out])
        c = jnp.stack([o[2] for o in out])
        return a, m, c


def _make_kernel(kind, input_dim, variance, lengthscales):
    if kind in ("se", "squared_exponential", "SquaredExponentialARD"):
        return SquaredExponentialARD.create(input_dim, variance, lengthscales)
    if kind in ("linear", "Linear"):
        return Linear.create(input_dim, variance)
    raise ValueError(f"unknown kernel {kind!r}")


def _make_mean(kind, d):
    if kind in ("identity", "Identity"):
        return IdentityMean(d)
    if kind in ("zero", "Zero"):
        return ZeroMean()
    raise ValueError(f"unknown mean function {kind!r}")


@dataclass(frozen=True)
class TrajectorySample:
    """One latent path, or a batch of them when arrays carry a leading sample axis."""

    states: np.ndarray
    function_values: np.ndarray | None = None
    inducing_draw: np.ndarray | None = None
    log_density_q: float | np.ndarray = 0.0

    @property
    def T(self):
        return self.states.shape[-2]


def _augment(x, c):
    return x if c is None else np.concatenate([x, c])


def _check_controls(model, controls, T):
    if model.control_dim == 0:
        return None
    if controls is None:
        raise DimensionMismatch("model expects control inputs")
    c = np.atleast_2d(np.asarray(controls, dtype=float))
    if c.shape[0] < T - 1 or c.shape[1] != model.control_dim:
        raise DimensionMismatch(f"controls must be at least ({T - 1}, {model.control_dim}), got {c.shape}")
    return c


def sample_prior_trajectory(
    model: GpssmModel, controls=None, T=10, rng_seed=0, method="sequential"
) -> TrajectorySample:
    """Exact sample from the GPSSM prior, conditioning each f(x_t) on all earlier draws.

    Inducing points are ignored: this is the O(T^3) reference construction.
    Random numbers come from three spawned streams (initial state, process
    noise, function values) so changing the kernel does not shift the noise.

    ``method="sequential"`` runs eagerly with an incrementally grown factor
    and evaluates kernels and mean functions in numpy. ``method="compiled"``
    consumes the same noise in a jitted scan whose conditioning arrays are
    padded to T, so every step costs a full T x T triangular solve.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if method not in ("sequential", "compiled"):
        raise ValueError(f"unknown method {method!r}")
    c = _check_controls(model, controls, T)
    D, D_in = model.latent_dim, model.input_dim
    init_rng, proc_rng, fn_rng = rng_streams(rng_seed, 3)
    x1 = model.initial_state.sample(init_rng)
    if method == "compiled":
        if T == 1:
            return TrajectorySample(states=x1[None])
        eps_f = fn_rng.standard_normal((T - 1, 1, D))
        eps_x = proc_rng.standard_normal((T - 1, 1, D))
        cs = None if c is None else jnp.asarray(c[: T - 1])
        states, fvals = _exact_prior_scan(model, jnp.asarray(x1[None]), cs, eps_f, eps_x, T)
        return TrajectorySample(states=np.asarray(states[0]), function_values=np.asarray(fvals[0]))
    sqrt_q = np.sqrt(np.asarray(model.Q))
    states = np.empty((T, D))
    states[0] = x1
    fvals = np.empty((T - 1, D))
    conds = [
        ConditioningState.empty(model.kernels[d], model.mean_fns[d], D_in, capacity=max(T, 2))
        for d in range(D)
    ]
    for t in range(T - 1):
        xin = _augment(states[t], None if c is None else c[t])
        eps_f = fn_rng.standard_normal(D)
        i_near, dist = conds[0].nearest(xin)
        for d in range(D):
            if dist < DUPLICATE_TOL:
                fvals[t, d] = conds[d].values[i_near]
                continue
            mean, var, row = conds[d].predict(xin)
            fvals[t, d] = mean + np.sqrt(var) * eps_f[d]
            conds[d] = conds[d].extend(xin, fvals[t, d], row)
        states[t + 1] = fvals[t] + sqrt_q * proc_rng.standard_normal(D)
    return TrajectorySample(states=states, function_values=fvals if T > 1 else None)


@partial(jax.jit, static_argnames=("T",))
def _exact_prior_scan(model, x1, controls, eps_f, eps_x, T):
    n, D = x1.shape
    sqrt_q = jnp.sqrt(model.Q)
    idx = jnp.arange(T)
    jitter = 1e-10

    def step(carry, inp):
        x, X, F, L, E, count = carry
        c, ef, ex = inp
        xin = x if c is None else jnp.concatenate([x, jnp.broadcast_to(c, (n, c.shape[0]))], 1)
        valid = idx[None] < count[:, None]
        dist2 = jnp.where(valid, jnp.sum((X - xin[:, None]) ** 2, -1), jnp.inf)
        near = jnp.argmin(dist2, 1)
        dup = jnp.min(dist2, 1) < DUPLICATE_TOL**2
        slot = (idx[None] == count[:, None]).astype(x.dtype)
        fs, Fs, Ls, Es = [], [], [], []
        for d in range(D):
            k = model.kernels[d]
            kx = jax.vmap(lambda a, B: k(a[None], B)[0])(xin, X)
            kx = jnp.where(valid, kx, 0.0)
            l = jsl.solve_triangular(L[d], kx[..., None], lower=True)[..., 0]
            prior_mean = model.mean_fns[d](xin)
            mean = prior_mean + jnp.sum(l * E[d], -1)
            kxx = k.diag(xin)
            ll = jnp.sum(l**2, -1)
            resid = kxx * (1.0 + jitter) - ll
            f_new = mean + jnp.sqrt(jnp.maximum(resid, 0.0)) * ef[:, d]
            pivot = jnp.where(kxx > 0, jnp.sqrt(jnp.maximum(resid, 1e-300)), 1.0)
            f = jnp.where(dup, jnp.take_along_axis(F[d], near[:, None], 1)[:, 0], f_new)
            e_new = (f - prior_mean - jnp.sum(l * E[d], -1)) / pivot
            row = l + pivot[:, None] * slot
            keep = dup[:, None]
            Ls.append(jnp.where(keep[..., None], L[d], L[d] * (1 - slot[..., None]) + slot[..., None] * row[:, None]))
            Es.append(jnp.where(keep, E[d], E[d] + slot * e_new[:, None]))
            Fs.append(jnp.where(keep, F[d], F[d] + slot * f[:, None]))
            fs.append(f)
        X = jnp.where(dup[:, None, None], X, X + slot[..., None] * xin[:, None])
        f = jnp.stack(fs, 1)
        x_new = f + sqrt_q * ex
        count = count + (~dup).astype(count.dtype)
        return (x_new, X, jnp.stack(Fs), jnp.stack(Ls), jnp.stack(Es), count), (x_new, f)

    Din = model.input_dim
    init = (
        x1,
        jnp.zeros((n, T, Din)),
        jnp.zeros((D, n, T)),
        jnp.broadcast_to(jnp.eye(T), (D, n, T, T)),
        jnp.zeros((D, n, T)),
        jnp.zeros(n, dtype=jnp.int32),
    )
    _, (xs, fs) = jax.lax.scan(step, init, (controls, eps_f, eps_x))
    return jnp.concatenate([x1[:, None], jnp.swapaxes(xs, 0, 1)], 1), jnp.swapaxes(fs, 0, 1)


def sample_prior_batch(model: GpssmModel, T, n_samples=1, rng_seed=0, controls=None) -> np.ndarray:
    """Exact prior trajectories (n_samples, T, D) from a compiled fixed-shape sampler.

    Same construction as ``sample_prior_trajectory`` but batched over
    trajectories and with every conditioning array padded to T. Each step
    solves a full T x T triangular system, so the cost is cubic in T.
    Random numbers come from jax keys, not the numpy streams.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    c = _check_controls(model, controls, T)
    D = model.latent_dim
    k1, k2, k3 = jax.random.split(jax.random.PRNGKey(rng_seed), 3)
    init = model.initial_state
    x1 = init.mean + jax.random.normal(k1, (n_samples, D)) @ init.cov.lower_factor.T
    if T == 1:
        return np.asarray(x1[:, None])
    eps_f = jax.random.normal(k2, (T - 1, n_samples, D))
    eps_x = jax.random.normal(k3, (T - 1, n_samples, D))
    cs = None if c is None else jnp.asarray(c[: T - 1])
    return np.asarray(_exact_prior_scan(model, x1, cs, eps_f, eps_x, T)[0])


def emit_observations(model: GpssmModel, states, rng_seed=0) -> np.ndarray:
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[1] != model.latent_dim:
        raise DimensionMismatch(f"states have {X.shape[1]} columns, model has D={model.latent_dim}")
    em = model.emission
    rng = np.random.default_rng(rng_seed)
    mean = X @ np.asarray(em.C).T + np.asarray(em.d)
    return mean + np.sqrt(np.asarray(em.R)) * rng.standard_normal(mean.shape)


@partial(jax.jit, static_argnames=("horizon",))
def _rollout(model, x0, v, controls, eps, horizon):
    chols = model.Kzz_chols()

    def step(x, inputs):
        c, e = inputs
        xin = x if c is None else jnp.concatenate([x, jnp.broadcast_to(c, (x.shape[0], c.shape[0]))], 1)
        per_dim = []
        for d in range(model.latent_dim):
            a, m, cv = model.gp(d).project(xin, chols[d])
            mean = m + jnp.sum(a.T * v[:, d], 1)
            per_dim.append((mean, cv))
        mean = jnp.stack([p[0] for p in per_dim], 1)
        var = jnp.stack([p[1] for p in per_dim], 1) + model.Q
        x_new = mean + jnp.sqrt(var) * e
        return x_new, model.emission.mean(x_new)

    _, ys = jax.lax.scan(step, x0, (controls, eps))
    return jnp.swapaxes(ys, 0, 1)


def draw_whitened_u(model, key, n):
    """v ~ q(v) for every dimension: shape (n, D, M)."""
    eps = jax.random.normal(key, (n, model.latent_dim, model.num_inducing))
    return model.q_mu[None] + jnp.einsum("dij,ndj->ndi", model.q_sqrt(), eps)


def rollout_predict(
    model: GpssmModel,
    start_state_dist,
    controls=None,
    horizon=30,
    n_samples=1000,
    rng_seed=0,
    u_draws=None,
) -> np.ndarray:
    """Sample observation means C x + d for ``horizon`` steps past the start state.

    ``start_state_dist`` is a ``GaussianDist`` or an (n_samples, D) array of
    start states already drawn from the posterior. Each sample uses one
    whitened inducing draw (``u_draws``, shape (n_samples, D, M)) for its whole
    rollout; fresh draws from q(u) are made when none are given.
    """
    E = model.emission.obs_dim
    if horizon == 0:
        if not isinstance(start_state_dist, GaussianDist):
            n_samples = np.shape(start_state_dist)[0]
        return np.zeros((n_samples, 0, E))
    key = jax.random.PRNGKey(rng_seed)
    k_x0, k_u, k_eps = jax.random.split(key, 3)
    D = model.latent_dim
    if isinstance(start_state_dist, GaussianDist):
        eps0 = jax.random.normal(k_x0, (n_samples, D))
        x0 = start_state_dist.mean + eps0 @ start_state_dist.cov.lower_factor.T
    else:
        x0 = jnp.asarray(start_state_dist, dtype=float)
        n_samples = x0.shape[0]
    v = draw_whitened_u(model, k_u, n_samples) if u_draws is None else jnp.asarray(u_draws)
    if model.control_dim:
        c = jnp.asarray(controls, dtype=float)[:horizon]
        if c.shape != (horizon, model.control_dim):
            raise DimensionMismatch(f"controls must be ({horizon}, {model.control_dim}), got {c.shape}")
    else:
        c = None
    eps = jax.random.normal(k_eps, (horizon, n_samples, D))
    return np.asarray(_rollout(model, x0, v, c, eps, horizon))


def deterministic_rollout(model: GpssmModel, x0, controls=None, horizon=30):
    """Iterate the posterior-mean transition map from ``x0`` without any noise."""
    x = jnp.asarray(x0, dtype=float)[None]
    chols = model.Kzz_chols()
    out = []
    for t in range(horizon):
        xin = x if not model.control_dim else jnp.concatenate([x, jnp.asarray(controls)[t][None]], 1)
        x = jnp.stack([model.gp(d).marginal(xin, chols[d])[0] for d in range(model.latent_dim)], 1)
        out.append(model.emission.mean(x)[0])
    return np.asarray(jnp.stack(out)) if out else np.zeros((0, model.emission.obs_dim))
