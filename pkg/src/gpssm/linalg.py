"""Dense linear algebra on Cholesky factors.

Two layers live here. The public functions (``cholesky``, ``tri_solve``,
``gaussian_log_density``, ``gaussian_kl``) run eagerly on numpy arrays and
raise on bad input. The underscore-free ``*_chol`` helpers at the bottom are
written with ``jax.numpy`` so they can be traced and differentiated inside
the ELBO; they take raw factors instead of ``PsdMatrix`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
from scipy.linalg import solve_triangular

from .errors import AsymmetricInput, DimensionMismatch, NotFactorizable

JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PsdMatrix:
    """A symmetric positive (semi)definite matrix held as its Cholesky factor."""

    lower_factor: np.ndarray
    jitter_used: float = 0.0

    def __post_init__(self):
        L = np.asarray(self.lower_factor, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise DimensionMismatch(f"factor must be square, got shape {L.shape}")
        object.__setattr__(self, "lower_factor", L)

    @property
    def dim(self) -> int:
        return self.lower_factor.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        L = self.lower_factor
        return L @ L.T

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.abs(np.diag(self.lower_factor)))))

    @classmethod
    def from_matrix(cls, matrix, schedule=JITTER_SCHEDULE) -> "PsdMatrix":
        return cholesky(matrix, schedule)

    @classmethod
    def diagonal(cls, variances) -> "PsdMatrix":
        return cls(np.diag(np.sqrt(np.asarray(variances, dtype=float))))


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: PsdMatrix

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1 or mean.shape[0] != self.cov.dim:
            raise DimensionMismatch(
                f"mean of length {mean.shape} does not match covariance dim {self.cov.dim}"
            )
        object.__setattr__(self, "mean", mean)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_cov(cls, mean, cov) -> "GaussianDist":
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(mean, cholesky(cov))

    @classmethod
    def standard(cls, dim: int) -> "GaussianDist":
        return cls(np.zeros(dim), PsdMatrix(np.eye(dim)))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        eps = rng.standard_normal(shape)
        return self.mean + eps @ self.cov.lower_factor.T


def cholesky(matrix, schedule=JITTER_SCHEDULE) -> PsdMatrix:
    """Factorise ``matrix + jitter * I`` with the smallest jitter in ``schedule`` that works."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-10):
        raise AsymmetricInput("matrix is not symmetric within 1e-10")
    eye = np.eye(A.shape[0])
    for jitter in schedule:
        try:
            L = np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0.0):
            return PsdMatrix(L, float(jitter))
    raise NotFactorizable(f"matrix not factorisable with jitter up to {schedule[-1]}")


def tri_solve(factor: PsdMatrix, rhs) -> np.ndarray:
    """Return ``A^{-1} rhs`` for ``A = L L^T`` using two triangular solves."""
    b = np.asarray(rhs, dtype=float)
    if b.shape[0] != factor.dim:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor has dim {factor.dim}")
    L = factor.lower_factor
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, y, lower=False)


def gaussian_log_density(x, dist: GaussianDist) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != dist.mean.shape:
        raise DimensionMismatch(f"x has shape {x.shape}, distribution has dim {dist.dim}")
    alpha = solve_triangular(dist.cov.lower_factor, x - dist.mean, lower=True)
    return float(-0.5 * (dist.dim * LOG_2PI + dist.cov.logdet() + alpha @ alpha))


def gaussian_kl(q: GaussianDist, p: GaussianDist) -> float:
    """KL[q || p] between two multivariate normals."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimensions differ: {q.dim} vs {p.dim}")
    Lp = p.cov.lower_factor
    M = solve_triangular(Lp, q.cov.lower_factor, lower=True)
    alpha = solve_triangular(Lp, q.mean - p.mean, lower=True)
    kl = 0.5 * (np.sum(M**2) + alpha @ alpha - q.dim + p.cov.logdet() - q.cov.logdet())
    return max(float(kl), 0.0)


# ---------------------------------------------------------------------------
# traceable helpers


def softplus(x):
    return jnp.logaddexp(x, 0.0)


def inv_softplus(y):
    y = jnp.asarray(y, dtype=float)
    return y + jnp.log(-jnp.expm1(-y))


def fill_lower(raw):
    """Lower-triangular factor with a softplus-positive diagonal from an unconstrained square array."""
    diag = softplus(jnp.diagonal(raw, axis1=-2, axis2=-1))
    strict = jnp.tril(raw, k=-1)
    return strict + diag[..., None] * jnp.eye(raw.shape[-1])


def unfill_lower(L):
    L = jnp.asarray(L, dtype=float)
    diag = jnp.diagonal(L, axis1=-2, axis2=-1)
    return jnp.tril(L, k=-1) + inv_softplus(diag)[..., None] * jnp.eye(L.shape[-1])


def jitter_cholesky(K, jitter=1e-6):
    """Fixed-jitter Cholesky for traced code, where the escalation loop is unavailable."""
    n = K.shape[-1]
    scale = jnp.maximum(jnp.mean(jnp.diagonal(K, axis1=-2, axis2=-1), axis=-1), 1e-300)
    return jnp.linalg.cholesky(K + (jitter * scale)[..., None, None] * jnp.eye(n))


def logdet_chol(L):
    return 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(L, axis1=-2, axis2=-1))), axis=-1)


def mvn_logpdf_chol(x, mean, L):
    """log N(x; mean, L L^T); batches over leading axes of ``x`` and ``mean``."""
    diff = x - mean
    L = jnp.broadcast_to(L, diff.shape[:-1] + L.shape[-2:])
    alpha = jsl.solve_triangular(L, diff[..., None], lower=True)[..., 0]
    d = x.shape[-1]
    return -0.5 * (d * LOG_2PI + logdet_chol(L) + jnp.sum(alpha**2, axis=-1))


def mvn_logpdf_diag(x, mean, var):
    return -0.5 * jnp.sum(LOG_2PI + jnp.log(var) + (x - mean) ** 2 / var, axis=-1)


def kl_chol(mq, Lq, mp, Lp):
    """KL[N(mq, Lq Lq^T) || N(mp, Lp Lp^T)] with traceable ops."""
    M = jsl.solve_triangular(Lp, Lq, lower=True)
    alpha = jsl.solve_triangular(Lp, (mq - mp)[..., None], lower=True)[..., 0]
    d = mq.shape[-1]
    return 0.5 * (
        jnp.sum(M**2, axis=(-2, -1))
        + jnp.sum(alpha**2, axis=-1)
        - d
        + logdet_chol(Lp)
        - logdet_chol(Lq)
    )


def kl_to_diag(mq, Lq, mp, p_var):
    """KL[N(mq, Lq Lq^T) || N(mp, diag(p_var))]."""
    d = mq.shape[-1]
    trace = jnp.sum(jnp.sum(Lq**2, axis=-1) / p_var, axis=-1)
    maha = jnp.sum((mq - mp) ** 2 / p_var, axis=-1)
    return 0.5 * (trace + maha - d + jnp.sum(jnp.log(p_var), axis=-1) - logdet_chol(Lq))


def kl_to_standard(mean, L):
    """KL[N(mean, L L^T) || N(0, I)]."""
    d = mean.shape[-1]
    return 0.5 * (
        jnp.sum(L**2, axis=(-2, -1)) + jnp.sum(mean**2, axis=-1) - d - logdet_chol(L)
    )
