"""Kernels, mean functions, sparse variational GPs and exact sequential GP conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.blas import dtpsv

from .errors import DimensionMismatch, NumericalError
from .linalg import (
    GaussianDist,
    PsdMatrix,
    cholesky,
    fill_lower,
    inv_softplus,
    jitter_cholesky,
    kl_to_standard,
    softplus,
    unfill_lower,
)

pytree = jax.tree_util.register_dataclass

DEFAULT_JITTER = 1e-6
DUPLICATE_TOL = 1e-8


def _static(default):
    return field(default=default, metadata=dict(static=True))


# ---------------------------------------------------------------------------
# kernels


@pytree
@dataclass(frozen=True)
class SquaredExponentialARD:
    """k(x, x') = s^2 exp(-0.5 sum_i (x_i - x'_i)^2 / l_i^2)."""

    raw_variance: jax.Array
    raw_lengthscales: jax.Array

    @classmethod
    def create(cls, input_dim, variance=1.0, lengthscales=1.0):
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (input_dim,))
        return cls(inv_softplus(variance), inv_softplus(ls))

    @property
    def variance(self):
        return softplus(self.raw_variance)

    @property
    def lengthscales(self):
        return softplus(self.raw_lengthscales)

    @property
    def input_dim(self):
        return self.raw_lengthscales.shape[-1]

    def __call__(self, A, B):
        # direct differences: the expanded |a|^2 + |b|^2 - 2ab form loses accuracy for nearby points
        diff = (A[:, None, :] - B[None, :, :]) / self.lengthscales
        return self.variance * jnp.exp(-0.5 * jnp.sum(diff**2, -1))

    def diag(self, A):
        return jnp.full(A.shape[:-1], self.variance)


@pytree
@dataclass(frozen=True)
class Linear:
    """k(x, x') = sum_i w_i x_i x'_i."""

    raw_weight_variances: jax.Array

    @classmethod
    def create(cls, input_dim, weight_variances=1.0):
        w = np.broadcast_to(np.asarray(weight_variances, dtype=float), (input_dim,))
        return cls(inv_softplus(w))

    @property
    def weight_variances(self):
        return softplus(self.raw_weight_variances)

    @property
    def input_dim(self):
        return self.raw_weight_variances.shape[-1]

    def __call__(self, A, B):
        return (A * self.weight_variances) @ B.T

    def diag(self, A):
        return jnp.sum(A**2 * self.weight_variances, -1)


def kernel_matrix(kernel, A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != kernel.input_dim or B.shape[1] != kernel.input_dim:
        raise DimensionMismatch(
            f"inputs have {A.shape[1]} and {B.shape[1]} columns, kernel expects {kernel.input_dim}"
        )
    return np.asarray(kernel(A, B))


# ---------------------------------------------------------------------------
# mean functions; each returns one scalar per input row


@pytree
@dataclass(frozen=True)
class ZeroMean:
    def __call__(self, X):
        return jnp.zeros(X.shape[:-1])


@pytree
@dataclass(frozen=True)
class IdentityMean:
    """Passes one input coordinate through, so the prior is a random walk around persistence."""

    output_index: int = _static(0)

    def __call__(self, X):
        return X[..., self.output_index]


@pytree
@dataclass(frozen=True)
class AffineMean:
    weights: jax.Array
    offset: jax.Array

    @classmethod
    def create(cls, weights, offset=0.0):
        return cls(jnp.asarray(weights, dtype=float), jnp.asarray(offset, dtype=float))

    def __call__(self, X):
        return X @ self.weights + self.offset


# ---------------------------------------------------------------------------
# sparse variational GP


@pytree
@dataclass(frozen=True)
class SparseGP:
    """One latent dimension's GP with inducing inputs ``Z`` and free Gaussian q(u).

    q(u) is stored whitened: u = m(Z) + L_K v with v ~ N(q_mu, S S^T), where
    L_K is the Cholesky factor of K_ZZ and S = fill_lower(q_sqrt_raw).
    """

    kernel: object
    mean_fn: object
    Z: jax.Array
    q_mu: jax.Array
    q_sqrt_raw: jax.Array
    jitter: float = _static(DEFAULT_JITTER)

    @classmethod
    def create(cls, kernel, mean_fn, Z, q_mu=None, q_sqrt=None, jitter=DEFAULT_JITTER):
        Z = jnp.asarray(Z, dtype=float)
        M = Z.shape[0]
        q_mu = jnp.zeros(M) if q_mu is None else jnp.asarray(q_mu, dtype=float)
        q_sqrt = jnp.eye(M) if q_sqrt is None else jnp.asarray(q_sqrt, dtype=float)
        return cls(kernel, mean_fn, Z, q_mu, unfill_lower(q_sqrt), jitter)

    @classmethod
    def from_moments(cls, kernel, mean_fn, Z, mu_u, Sigma_u, jitter=DEFAULT_JITTER):
        """Build from an unwhitened q(u) = N(mu_u, Sigma_u)."""
        gp = cls.create(kernel, mean_fn, Z, jitter=jitter)
        Lk = np.asarray(gp.Kzz_chol())
        v = solve_triangular(Lk, np.asarray(mu_u, float) - np.asarray(gp.mean_fn(gp.Z)), lower=True)
        W = solve_triangular(Lk, np.asarray(Sigma_u, float), lower=True)
        Sv = solve_triangular(Lk, W.T, lower=True)
        Sv = 0.5 * (Sv + Sv.T)
        L = cholesky(Sv).lower_factor
        L = np.tril(L, -1) + np.diag(np.maximum(np.diag(L), 1e-150))
        return replace(gp, q_mu=jnp.asarray(v), q_sqrt_raw=unfill_lower(L))

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def input_dim(self):
        return self.Z.shape[1]

    @property
    def q_sqrt(self):
        return fill_lower(self.q_sqrt_raw)

    def Kzz_chol(self):
        return jitter_cholesky(self.kernel(self.Z, self.Z), self.jitter)

    @property
    def q_u_mean(self):
        return np.asarray(self.mean_fn(self.Z) + self.Kzz_chol() @ self.q_mu)

    @property
    def q_u_cov(self) -> PsdMatrix:
        return PsdMatrix(np.asarray(self.Kzz_chol() @ self.q_sqrt))

    def project(self, X, Lk=None):
        """Whitened projections of inputs ``X`` (n, D_in) onto the inducing variables.

        Returns ``(a, prior_mean, cond_var)`` where ``a = L_K^{-1} K_{Z,X}`` has
        shape (M, n), so that f(x) | v has mean ``prior_mean + a^T v`` and
        variance ``cond_var``.
        """
        Lk = self.Kzz_chol() if Lk is None else Lk
        a = jsl.solve_triangular(Lk, self.kernel(self.Z, X), lower=True)
        cond_var = self.kernel.diag(X) - jnp.sum(a**2, 0)
        return a, self.mean_fn(X), jnp.maximum(cond_var, 0.0)

    def marginal(self, X, Lk=None):
        """Mean and variance of f(X) under q(f) with u integrated out."""
        a, m, cond_var = self.project(X, Lk)
        mean = m + a.T @ self.q_mu
        var = cond_var + jnp.sum((self.q_sqrt.T @ a) ** 2, 0)
        return mean, var

    def kl(self):
        return kl_to_standard(self.q_mu, self.q_sqrt)


def sparse_conditional(gp: SparseGP, x):
    """Return ``(mean_weights, prior_mean, cond_var, marg_var)`` at a single input ``x``.

    ``mean_weights`` is k_{x,Z} K_{Z,Z}^{-1}, so E[f(x) | u] = prior_mean + w^T (u - m_Z).
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape != (1, gp.input_dim):
        raise DimensionMismatch(f"x must have {gp.input_dim} entries, got shape {np.shape(x)}")
    Lk = gp.Kzz_chol()
    a = jsl.solve_triangular(Lk, gp.kernel(gp.Z, X), lower=True)
    w = np.asarray(jsl.solve_triangular(Lk.T, a, lower=False))[:, 0]
    cond_var = float(gp.kernel.diag(X)[0] - jnp.sum(a**2))
    if cond_var < -1e-10:
        raise NumericalError(f"conditional variance {cond_var:.3e} is negative")
    cond_var = max(cond_var, 0.0)
    explained = float(jnp.sum((gp.q_sqrt.T @ a) ** 2))
    return w, float(gp.mean_fn(X)[0]), cond_var, cond_var + explained


def kl_qu_pu(gps) -> float:
    """KL[q(u) || p(u)]; summed when given a sequence of per-dimension GPs."""
    if isinstance(gps, SparseGP):
        return float(gps.kl())
    return float(sum(gp.kl() for gp in gps))


# ---------------------------------------------------------------------------
# exact sequential conditioning


class _Buffers:
    # the factor is kept row by row in packed storage (row i holds L[i, :i+1]),
    # which BLAS reads as an upper-packed U = L^T; appending a row is contiguous
    def __init__(self, input_dim, capacity):
        self.X = np.empty((capacity, input_dim))
        self.f = np.empty(capacity)
        self.e = np.empty(capacity)
        self.P = np.zeros(capacity * (capacity + 1) // 2)
        self.capacity = capacity
        self.filled = 0

    def copy_prefix(self, n, capacity=None):
        new = _Buffers(self.X.shape[1], self.capacity if capacity is None else capacity)
        new.X[:n] = self.X[:n]
        new.f[:n] = self.f[:n]
        new.e[:n] = self.e[:n]
        k = n * (n + 1) // 2
        new.P[:k] = self.P[:k]
        new.filled = n
        return new

    def grow(self, n):
        return self.copy_prefix(n, max(2 * self.capacity, n + 1))

    def dense_factor(self, n):
        L = np.zeros((n, n))
        for i in range(n):
            start = i * (i + 1) // 2
            L[i, : i + 1] = self.P[start : start + i + 1]
        return L


def _numpy_fns(kernel, mean_fn):
    """Plain numpy (cross, auto, mean) evaluators for the sequential hot loop."""
    if isinstance(kernel, SquaredExponentialARD):
        s2 = float(kernel.variance)
        inv_ls = np.asarray(1.0 / kernel.lengthscales)

        def cross(X, x):
            d = (X - x) * inv_ls
            return s2 * np.exp(-0.5 * np.einsum("ij,ij->i", d, d))

        def auto(x):
            return s2

    elif isinstance(kernel, Linear):
        w = np.asarray(kernel.weight_variances)

        def cross(X, x):
            return X @ (w * x)

        def auto(x):
            return float(np.sum(w * x * x))

    else:

        def cross(X, x):
            return np.asarray(kernel(X, x[None]))[:, 0]

        def auto(x):
            return float(kernel.diag(x[None])[0])

    if hasattr(mean_fn, "numpy_call"):
        mean = mean_fn.numpy_call
    elif isinstance(mean_fn, IdentityMean):
        idx = mean_fn.output_index

        def mean(x):
            return float(x[idx])

    elif isinstance(mean_fn, ZeroMean):

        def mean(x):
            return 0.0

    elif isinstance(mean_fn, AffineMean):
        w_m = np.asarray(mean_fn.weights)
        b_m = float(mean_fn.offset)

        def mean(x):
            return float(x @ w_m) + b_m

    else:

        def mean(x):
            return float(np.asarray(mean_fn(x[None]))[0])

    return cross, auto, mean


@dataclass(frozen=True)
class ConditioningState:
    """Function values sampled so far for one GP, with an incrementally grown Cholesky factor.

    States share append-only buffers; extending an older state than the
    latest one copies first, so every state object stays valid.
    """

    kernel: object
    mean_fn: object
    n: int
    _buf: _Buffers
    jitter: float = 1e-10
    _fns: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._fns is None:
            object.__setattr__(self, "_fns", _numpy_fns(self.kernel, self.mean_fn))

    @classmethod
    def empty(cls, kernel, mean_fn, input_dim, capacity=64, jitter=1e-10):
        return cls(kernel, mean_fn, 0, _Buffers(input_dim, capacity), jitter)

    @property
    def inputs(self):
        return self._buf.X[: self.n]

    @property
    def values(self):
        return self._buf.f[: self.n]

    @property
    def factor(self):
        return self._buf.dense_factor(self.n)

    def _row(self, x):
        if self.n == 0:
            return np.empty(0)
        kx = self._fns[0](self.inputs, x)
        return dtpsv(self.n, self._buf.P, kx, lower=0, trans=1)

    def nearest(self, x):
        if self.n == 0:
            return None, np.inf
        dist = np.sqrt(np.sum((self.inputs - x) ** 2, axis=1))
        i = int(np.argmin(dist))
        return i, float(dist[i])

    def predict(self, x):
        """``(mean, var, row)`` where ``row`` can be handed to ``extend`` to skip a second solve.

        ``var`` includes the diagonal jitter (``jitter * k(x, x)``), so the
        product of successive conditionals is exactly the joint density under
        the stored factor. A point with zero prior variance gets variance 0.
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        _, auto, mean_fn = self._fns
        l = self._row(x)
        mean = mean_fn(x) + float(l @ self._buf.e[: self.n])
        kxx = auto(x)
        return mean, max(kxx * (1.0 + self.jitter) - float(l @ l), 0.0), l

    def conditional(self, x):
        """Mean and variance of f(x) given the stored values."""
        mean, var, _ = self.predict(x)
        return mean, var

    def extend(self, x, value, row=None) -> "ConditioningState":
        x = np.asarray(x, dtype=float).reshape(-1)
        _, auto, mean_fn = self._fns
        buf = self._buf
        if buf.filled != self.n or self.n == buf.capacity:
            buf = buf.grow(self.n) if self.n == buf.capacity else buf.copy_prefix(self.n)
        l = self._row(x) if row is None else row
        kxx = auto(x)
        d2 = kxx * (1.0 + self.jitter) - float(l @ l)
        if kxx == 0.0:
            # k(x, .) vanishes identically, so any unit pivot keeps the factor exact
            d2 = 1.0
        elif not d2 > 0.0:
            raise NumericalError(f"running kernel matrix not positive definite (pivot {d2:.3e})")
        d = np.sqrt(d2)
        n = self.n
        buf.X[n] = x
        buf.f[n] = value
        start = n * (n + 1) // 2
        buf.P[start : start + n] = l
        buf.P[start + n] = d
        buf.e[n] = (value - mean_fn(x) - float(l @ buf.e[:n])) / d
        buf.filled = n + 1
        return ConditioningState(self.kernel, self.mean_fn, n + 1, buf, self.jitter, self._fns)


def gp_prior_conditional(state: ConditioningState, query, kernel=None, mean_fn=None) -> GaussianDist:
    """p(f(query) | f(x_1..x_t)) for the GP held by ``state``.

    ``kernel``/``mean_fn`` default to the ones the state was built with; passing
    different ones is an error because the stored factor would be stale.
    """
    if kernel is not None and kernel is not state.kernel:
        raise ValueError("kernel differs from the one used to build the conditioning state")
    if mean_fn is not None and mean_fn is not state.mean_fn:
        raise ValueError("mean function differs from the one used to build the conditioning state")
    x = np.asarray(query, dtype=float).reshape(-1)
    if x.shape[0] != state._buf.X.shape[1]:
        raise DimensionMismatch(f"query has {x.shape[0]} entries, state expects {state._buf.X.shape[1]}")
    mean, var = state.conditional(x)
    return GaussianDist(np.array([mean]), PsdMatrix(np.array([[np.sqrt(var)]])))


def extend_conditioning_state(state: ConditioningState, new_input, new_value) -> ConditioningState:
    x = np.asarray(new_input, dtype=float).reshape(-1)
    if x.shape[0] != state._buf.X.shape[1]:
        raise DimensionMismatch(f"input has {x.shape[0]} entries, state expects {state._buf.X.shape[1]}")
    return state.extend(x, float(new_value))
