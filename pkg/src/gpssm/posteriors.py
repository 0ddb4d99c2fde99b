"""Approximate posteriors over latent trajectories.

Every family has Markov Gaussian transitions q(x_{t+1} | ., x_t) = N(A_t f_t + b_t, S*_t):

================================  ==========================  ==============================
variant                           f_t                         S*_t
================================  ==========================  ==============================
``FACTORISED_LINEAR``             x_t                         S_t
``FACTORISED_NONLINEAR``          E_q[f(x_t)]                 S_t + A_t C_f(x_t) A_t^T
``NONFACTORISED_CHUNKED``         sampled f(x_t)              S_t
``VCDT``                          E[f(x_t) | u], u ~ q(u)     S_t + A_t C_{f|u}(x_t) A_t^T
``PRSSM``                         as VCDT with A=I, b=0, S=Q
================================  ==========================  ==============================

``C_f`` is the sparse GP's marginal variance and ``C_{f|u}`` its variance
given u. The chunked variant draws f by exact conditioning on the earlier
draws of the same chunk (u integrated out) and restarts every
``chunk_length`` states from a free Gaussian.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np

from .errors import DimensionMismatch
from .linalg import (
    GaussianDist,
    PsdMatrix,
    fill_lower,
    inv_softplus,
    kl_to_diag,
    mvn_logpdf_chol,
    softplus,
    unfill_lower,
)
from .model import GpssmModel, TrajectorySample

pytree = jax.tree_util.register_dataclass

CHUNK_VAR_FLOOR = 1e-12


class Variant(str, enum.Enum):
    FACTORISED_LINEAR = "factorised_linear"
    FACTORISED_NONLINEAR = "factorised_nonlinear"
    NONFACTORISED_CHUNKED = "nonfactorised_chunked"
    VCDT = "vcdt"
    PRSSM = "prssm"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {
            "fl": cls.FACTORISED_LINEAR,
            "factorized_linear": cls.FACTORISED_LINEAR,
            "fnl": cls.FACTORISED_NONLINEAR,
            "factorized_nonlinear": cls.FACTORISED_NONLINEAR,
            "chunked": cls.NONFACTORISED_CHUNKED,
            "pr_ssm": cls.PRSSM,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown posterior variant {name!r}; expected one of: {valid}") from None

    @property
    def uses_u_draw(self):
        return self in (Variant.VCDT, Variant.PRSSM)


def _static(default):
    return field(default=default, metadata=dict(static=True))


@pytree
@dataclass(frozen=True)
class PosteriorSpec:
    """Variational parameters of q(X | f).

    ``A`` is (K, D, D) and ``raw_S`` is (K, D) with K = T - 1, or K = 1 when
    tied across time; ``b`` is always (T - 1, D). ``chunk_means`` and
    ``chunk_chol_raw`` hold the free Gaussians for chunk starts after the
    first (empty unless the variant is chunked).
    """

    q_x1_mean: jax.Array
    q_x1_chol_raw: jax.Array
    A: jax.Array
    b: jax.Array
    raw_S: jax.Array
    chunk_means: jax.Array
    chunk_chol_raw: jax.Array
    variant: Variant = _static(Variant.VCDT)
    chunk_length: int | None = _static(None)
    biased_independent_f: bool = _static(False)

    @classmethod
    def create(
        cls,
        variant,
        T,
        latent_dim,
        chunk_length=None,
        tie_across_time=False,
        q_x1_mean=None,
        q_x1_cov=None,
        A=None,
        b=None,
        S=None,
        chunk_means=None,
        chunk_covs=None,
        biased_independent_f=False,
    ):
        variant = Variant.parse(variant)
        D = latent_dim
        n_steps = max(T - 1, 0)
        K = 1 if tie_across_time else n_steps
        if variant is Variant.NONFACTORISED_CHUNKED:
            if chunk_length is None or not 1 <= chunk_length <= max(T, 1):
                raise ValueError(f"chunk_length must satisfy 1 <= tau <= T, got {chunk_length}")
            n_chunks = -(-T // chunk_length)
        else:
            chunk_length = None
            n_chunks = 1
        if biased_independent_f and variant is not Variant.PRSSM:
            raise ValueError("biased_independent_f only applies to the PRSSM variant")

        def stack(value, default, shape):
            if value is None:
                value = default
            arr = np.asarray(value, dtype=float)
            if arr.shape == shape[1:]:
                arr = np.broadcast_to(arr, shape)
            elif arr.shape != shape:
                if len(shape) and arr.shape[1:] == shape[1:] and arr.shape[0] in (1, n_steps):
                    arr = np.broadcast_to(arr[:1], shape) if shape[0] == 1 else arr
                else:
                    raise DimensionMismatch(f"expected shape {shape}, got {arr.shape}")
            return jnp.asarray(np.array(arr))

        A = stack(A, 0.5 * np.eye(D), (K, D, D))
        S = stack(S, 0.5 * np.ones(D), (K, D))
        b = stack(b, np.zeros(D), (n_steps, D))
        m1 = np.zeros(D) if q_x1_mean is None else np.asarray(q_x1_mean, dtype=float)
        c1 = np.eye(D) if q_x1_cov is None else np.atleast_2d(np.asarray(q_x1_cov, dtype=float))
        n_extra = n_chunks - 1
        cm = stack(chunk_means, np.zeros(D), (n_extra, D))
        cc = np.eye(D) if chunk_covs is None else np.asarray(chunk_covs, dtype=float)
        cc = np.broadcast_to(cc, (n_extra, D, D))
        return cls(
            q_x1_mean=jnp.asarray(m1),
            q_x1_chol_raw=unfill_lower(np.linalg.cholesky(c1)),
            A=A,
            b=b,
            raw_S=inv_softplus(S),
            chunk_means=cm,
            chunk_chol_raw=unfill_lower(np.linalg.cholesky(cc)) if n_extra else jnp.zeros((0, D, D)),
            variant=variant,
            chunk_length=chunk_length,
            biased_independent_f=biased_independent_f,
        )

    @property
    def latent_dim(self):
        return self.q_x1_mean.shape[0]

    @property
    def T(self):
        return self.b.shape[0] + 1

    @property
    def tie_across_time(self):
        return self.A.shape[0] == 1 and self.b.shape[0] != 1

    @property
    def S(self):
        return softplus(self.raw_S)

    @property
    def q_x1_chol(self):
        return fill_lower(self.q_x1_chol_raw)

    @property
    def q_x1(self) -> GaussianDist:
        return GaussianDist(np.asarray(self.q_x1_mean), PsdMatrix(np.asarray(self.q_x1_chol)))

    @property
    def chunk_chols(self):
        return fill_lower(self.chunk_chol_raw)

    @property
    def n_chunks(self):
        return self.chunk_means.shape[0] + 1

    def step_params(self, t):
        """(A_t, b_t, S_t) at a possibly traced time index ``t`` (0-based transition index)."""
        k = jnp.minimum(t, self.A.shape[0] - 1)
        return self.A[k], self.b[t], self.S[k]

    def with_variant(self, variant, **changes):
        return replace(self, variant=Variant.parse(variant), **changes)


# ---------------------------------------------------------------------------
# closed-form filtering factors


def _sum_over_obs(terms):
    """Exactly rounded sum over the leading (observation) axis, so relabelling outputs changes nothing."""
    return np.apply_along_axis(math.fsum, 0, terms) if terms.shape[0] else np.zeros(terms.shape[1:])


def filtering_factors(Q, C, R):
    """S* = (Q^-1 + C^T R^-1 C)^-1 and A = S* Q^-1, plus the gain S* C^T R^-1 used for b_t."""
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Qinv = np.diag(1.0 / Q)
    precision = Qinv + _sum_over_obs(C[:, :, None] * C[:, None, :] / R[:, None, None])
    S_star = np.linalg.inv(precision)
    S_star = 0.5 * (S_star + S_star.T)
    return S_star, S_star @ Qinv, S_star @ C.T @ np.diag(1.0 / R)


def filtering_init(model: GpssmModel, observations, variant=Variant.FACTORISED_LINEAR):
    """Exact filtering-factor values of (A_t, b_t, S_t) for every transition.

    ``S`` is back-derived from S* for the variants whose S* carries a
    function-variance term: C_f(x) for the factorised non-linear variant and
    C_{f|u}(x) for VCDT, each evaluated under the current q(u) at the
    least-squares state for y_t, then clamped at 1e-8. Off-diagonal entries
    of S* are dropped because S is diagonal.
    """
    variant = Variant.parse(variant)
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    em = model.emission
    Q = np.asarray(model.Q)
    R = np.asarray(em.R)
    if np.any(Q <= 0) or np.any(R <= 0):
        raise np.linalg.LinAlgError("Q and R must be positive definite")
    S_star, A, _ = filtering_factors(Q, em.C, R)
    T = Y.shape[0]
    C, d = np.asarray(em.C), np.asarray(em.d)
    info = _sum_over_obs(((Y[1:] - d) / R).T[:, :, None] * C[:, None, :])
    b = info @ S_star.T
    A = np.broadcast_to(A, (T - 1,) + A.shape).copy()
    S = np.broadcast_to(np.diag(S_star), (T - 1, S_star.shape[0])).copy()
    if variant in (Variant.FACTORISED_NONLINEAR, Variant.VCDT) and T > 1:
        x_hat = (Y[:-1] - np.asarray(em.d)) @ np.linalg.pinv(np.asarray(em.C)).T
        if model.control_dim:
            x_hat = np.concatenate([x_hat, np.zeros((T - 1, model.control_dim))], axis=1)
        chols = model.Kzz_chols()
        a, _, cond = model.project(jnp.asarray(x_hat), chols)
        if variant is Variant.VCDT:
            fvar = np.asarray(cond).T
        else:
            fvar = np.asarray(cond + jnp.sum(jnp.einsum("dmk,dmn->dkn", model.q_sqrt(), a) ** 2, 1)).T
        S = S - np.einsum("ij,nj,ij->ni", A[0], fvar, A[0])
    S = np.maximum(S, 1e-8)
    return A, b, S


def _identifiable(model):
    C = np.asarray(model.emission.C)
    return np.linalg.matrix_rank(C) == model.latent_dim


def initial_posterior(
    variant,
    model: GpssmModel,
    observations,
    chunk_length=None,
    tie_across_time=False,
    q_x1_mean=None,
    q_x1_cov=None,
    biased_independent_f=False,
) -> PosteriorSpec:
    """Posterior spec initialised at the filtering factors when C identifies the state.

    Otherwise A = 0.5 I, b = 0, S = 0.5 Q. Chunk starts are placed at the
    least-squares state for the observation at that time.
    """
    variant = Variant.parse(variant)
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    T, D = Y.shape[0], model.latent_dim
    ident = _identifiable(model)
    if ident and T > 1:
        A, b, S = filtering_init(model, Y, variant)
    else:
        A = np.broadcast_to(0.5 * np.eye(D), (max(T - 1, 0), D, D))
        b = np.zeros((max(T - 1, 0), D))
        S = np.broadcast_to(0.5 * np.asarray(model.Q), (max(T - 1, 0), D))
    if tie_across_time and T > 1:
        A, S = A[:1], S[:1]
    chunk_means = chunk_covs = None
    if variant is Variant.NONFACTORISED_CHUNKED and chunk_length is not None:
        starts = np.arange(chunk_length, T, chunk_length)
        if ident and len(starts):
            C = np.asarray(model.emission.C)
            pinv = np.linalg.pinv(C)
            chunk_means = (Y[starts] - np.asarray(model.emission.d)) @ pinv.T
            S_star = filtering_factors(np.asarray(model.Q), C, np.asarray(model.emission.R))[0]
            chunk_covs = np.diag(np.diag(S_star))
        elif len(starts):
            chunk_means = np.zeros((len(starts), D))
    return PosteriorSpec.create(
        variant,
        T,
        D,
        chunk_length=chunk_length,
        tie_across_time=tie_across_time,
        q_x1_mean=q_x1_mean,
        q_x1_cov=q_x1_cov,
        A=A,
        b=b,
        S=S,
        chunk_means=chunk_means,
        chunk_covs=chunk_covs,
        biased_independent_f=biased_independent_f,
    )


# ---------------------------------------------------------------------------
# transition moments shared by samplers, densities and KL terms


def _with_controls(x, c):
    if c is None:
        return x
    return jnp.concatenate([x, jnp.broadcast_to(c, (x.shape[0], c.shape[-1]))], axis=1)


def _diag_chol(var):
    return jnp.sqrt(var)[..., :, None] * jnp.eye(var.shape[-1])


def _inflated_chol(S, A, C):
    """Cholesky factor of diag(S) + A diag(C) A^T for a batch of C rows."""
    cov = jnp.einsum("ij,nj,kj->nik", A, C, A) + S[..., :, None] * jnp.eye(S.shape[-1])
    return jnp.linalg.cholesky(cov)


def _transition_kl(mq, S, mp, Q, A_minus_I, C):
    """E_f KL[N(A f + b, S) || N(f, Q)] for f ~ N(mp, diag C) and mq = A mp + b.

    The q side keeps its conditional covariance S; the spread of f adds
    0.5 tr(Q^-1 (A - I) diag(C) (A - I)^T). Row 1 passes A - I = -I since its
    q mean does not move with f.
    """
    kl = kl_to_diag(mq, _diag_chol(S), mp, Q)
    return kl + 0.5 * jnp.einsum("ij,nj,i->n", A_minus_I**2, C, 1.0 / Q)


def transition_moments(spec: PosteriorSpec, model: GpssmModel, t, x, chols, c=None, v=None, f=None):
    """q(x_{t+1} | context, x_t) and its transition KL for a batch of states ``x`` (n, D).

    Returns ``(mq, Lq, kl, f_t)``: the mean and Cholesky factor of S*_t, the
    expected KL against p(x_{t+1} | f, x_t) and the f_t column of the table
    above. ``v`` is a whitened inducing draw (n, D, M) for the u-conditioned
    variants and ``f`` a sampled function value (n, D) for the chunked one.
    """
    variant = spec.variant
    Q = model.Q
    xin = _with_controls(x, c)
    a, m, cond_var = model.project(xin, chols)  # (D, M, n), (D, n), (D, n)
    q_sqrt = model.q_sqrt()
    marg_mean = (m + jnp.einsum("dmn,dm->dn", a, model.q_mu)).T
    marg_var = (cond_var + jnp.sum(jnp.einsum("dmk,dmn->dkn", q_sqrt, a) ** 2, 1)).T
    cond_var = cond_var.T
    A, b, S = spec.step_params(t)
    n, D = x.shape
    eye = jnp.eye(D)
    S_chol = jnp.broadcast_to(_diag_chol(S), (n, D, D))

    if variant is Variant.FACTORISED_LINEAR:
        mq = x @ A.T + b
        return mq, S_chol, _transition_kl(mq, S, marg_mean, Q, -eye, marg_var), x

    if variant is Variant.NONFACTORISED_CHUNKED:
        mq = f @ A.T + b
        Lq = S_chol
        kl = kl_to_diag(mq, Lq, f, Q)
        tau = spec.chunk_length
        if spec.chunk_means.shape[0]:
            boundary = (t + 1) % tau == 0
            c_idx = jnp.clip((t + 1) // tau - 1, 0, spec.chunk_means.shape[0] - 1)
            m_c = jnp.broadcast_to(spec.chunk_means[c_idx], mq.shape)
            L_c = jnp.broadcast_to(spec.chunk_chols[c_idx], Lq.shape)
            mq = jnp.where(boundary, m_c, mq)
            Lq = jnp.where(boundary, L_c, Lq)
            kl = jnp.where(boundary, kl_to_diag(m_c, L_c, f, Q), kl)
        return mq, Lq, kl, f

    if variant is Variant.FACTORISED_NONLINEAR:
        mean, var = marg_mean, marg_var
    elif spec.biased_independent_f:
        mean, var = marg_mean, marg_var
    else:
        mean = (m + jnp.einsum("dmn,ndm->dn", a, v)).T
        var = cond_var
    if variant is Variant.PRSSM:
        # q(x_{t+1} | f, x_t) equals the prior transition
        return mean, _diag_chol(var + Q), jnp.zeros(n), mean
    mq = mean @ A.T + b
    return mq, _inflated_chol(S, A, var), _transition_kl(mq, S, mean, Q, A - eye, var), mean


# ---------------------------------------------------------------------------
# trajectory simulation


def draw_noise(key, n, T, D, M):
    """Standard-normal streams for ``n`` trajectories, one counter-derived key per trajectory."""

    def one(k):
        k1, k2, k3, k4 = jax.random.split(k, 4)
        return dict(
            x1=jax.random.normal(k1, (D,)),
            x=jax.random.normal(k2, (max(T - 1, 0), D)),
            u=jax.random.normal(k3, (D, M)),
            f=jax.random.normal(k4, (max(T - 1, 0), D)),
        )

    keys = jax.vmap(lambda i: jax.random.fold_in(key, i))(jnp.arange(n))
    return jax.vmap(one)(keys)


def _chunk_f_draw(model, spec, xin, buf, j, eps_f, chols):
    """Draw f(x) for each latent dimension conditioned on earlier draws in the current chunk."""
    Xb, Ab, Gb, Lb, Eb = buf
    tau = spec.chunk_length
    q_sqrt = model.q_sqrt()
    reset = j == 0
    eye = jnp.eye(tau)
    valid = jnp.arange(tau) < j
    onehot = (jnp.arange(tau) == j).astype(xin.dtype)
    f_out, new_A, new_G, new_L, new_E = [], [], [], [], []
    for d in range(model.latent_dim):
        gp = model.gp(d)
        a, m, cv = gp.project(xin, chols[d])  # (M, n), (n,), (n,)
        aT = a.T
        g = aT @ q_sqrt[d]  # (n, M): rows are S^T a
        mu = m + aT @ model.q_mu[d]
        kcross = jax.vmap(lambda xi, Xi: gp.kernel(xi[None], Xi)[0])(xin, Xb)  # (n, tau)
        cross = kcross - jnp.einsum("nm,ntm->nt", aT, Ab[d]) + jnp.einsum("nm,ntm->nt", g, Gb[d])
        cross = jnp.where(valid, cross, 0.0)
        L = jnp.where(reset, eye, Lb[d])
        e_prev = jnp.where(reset, 0.0, Eb[d])
        l = jsl.solve_triangular(L, cross[..., None], lower=True)[..., 0]
        cmean = mu + jnp.sum(l * e_prev, -1)
        cvar = cv + jnp.sum(g**2, -1) - jnp.sum(l**2, -1)
        sd = jnp.sqrt(jnp.maximum(cvar, CHUNK_VAR_FLOOR))
        f_out.append(cmean + sd * eps_f[:, d])
        row = l + sd[:, None] * onehot
        new_L.append(L.at[:, j, :].set(row))
        new_E.append(e_prev.at[:, j].set(eps_f[:, d]))
        new_A.append(Ab[d].at[:, j].set(aT))
        new_G.append(Gb[d].at[:, j].set(g))
    f = jnp.stack(f_out, 1)
    new_buf = (Xb.at[:, j].set(xin), jnp.stack(new_A), jnp.stack(new_G), jnp.stack(new_L), jnp.stack(new_E))
    return f, new_buf


def _chunk_buffers(model, spec, n):
    tau, D, M = spec.chunk_length, model.latent_dim, model.num_inducing
    return (
        jnp.zeros((n, tau, model.input_dim)),
        jnp.zeros((D, n, tau, M)),
        jnp.zeros((D, n, tau, M)),
        jnp.broadcast_to(jnp.eye(tau), (D, n, tau, tau)),
        jnp.zeros((D, n, tau)),
    )


def simulate(spec: PosteriorSpec, model: GpssmModel, controls, noise):
    """Draw trajectories from q and accumulate their log densities and transition KLs.

    ``noise`` comes from ``draw_noise``. Returns a dict with ``states``
    (n, T, D), ``f`` (n, T-1, D), ``v`` (n, D, M) whitened inducing draws,
    ``log_q`` (n,) and ``trans_kl`` (n, T-1). Fully traceable.
    """
    n, D = noise["x1"].shape
    L1 = spec.q_x1_chol
    x1 = spec.q_x1_mean + noise["x1"] @ L1.T
    log_q1 = mvn_logpdf_chol(x1, spec.q_x1_mean, L1)
    chols = model.Kzz_chols()
    v = model.q_mu[None] + jnp.einsum("dij,ndj->ndi", model.q_sqrt(), noise["u"])
    n_steps = noise["x"].shape[1]
    eps_x = jnp.swapaxes(noise["x"], 0, 1)
    eps_f = jnp.swapaxes(noise["f"], 0, 1)
    ts = jnp.arange(n_steps)
    cs = None if controls is None else jnp.asarray(controls)[:n_steps]
    chunked = spec.variant is Variant.NONFACTORISED_CHUNKED

    def step(carry, inp):
        x, buf = carry
        t, ex, ef, c = inp
        f = None
        if chunked:
            xin = _with_controls(x, c)
            f, buf = _chunk_f_draw(model, spec, xin, buf, t % spec.chunk_length, ef, chols)
        mq, Lq, kl, f_t = transition_moments(spec, model, t, x, chols, c, v=v, f=f)
        x_new = mq + jnp.einsum("nij,nj->ni", Lq, ex)
        log_q = mvn_logpdf_chol(x_new, mq, Lq)
        return (x_new, buf), (x_new, f_t, log_q, kl)

    buf0 = _chunk_buffers(model, spec, n) if chunked else None
    inputs = (ts, eps_x, eps_f, cs)
    if n_steps:
        _, (xs, fs, log_qs, kls) = jax.lax.scan(step, (x1, buf0), inputs)
    else:
        xs = jnp.zeros((0, n, D))
        fs = jnp.zeros((0, n, D))
        log_qs = jnp.zeros((0, n))
        kls = jnp.zeros((0, n))
    states = jnp.concatenate([x1[:, None], jnp.swapaxes(xs, 0, 1)], axis=1)
    return dict(
        states=states,
        f=jnp.swapaxes(fs, 0, 1),
        v=v,
        log_q=log_q1 + jnp.sum(log_qs, 0),
        trans_kl=jnp.swapaxes(kls, 0, 1),
    )


_simulate_jit = jax.jit(simulate)


def _check(spec, model, controls, T):
    if spec.latent_dim != model.latent_dim:
        raise DimensionMismatch(f"posterior has D={spec.latent_dim}, model has D={model.latent_dim}")
    if spec.T != T:
        raise DimensionMismatch(f"posterior parameters cover T={spec.T}, asked for T={T}")
    if model.control_dim:
        c = jnp.asarray(controls, dtype=float)
        if c.ndim != 2 or c.shape[0] < T - 1 or c.shape[1] != model.control_dim:
            raise DimensionMismatch(f"controls must be ({T - 1}, {model.control_dim}), got {c.shape}")
        return c[: T - 1]
    return None


def unwhiten_u(model, v):
    """Inducing values u (..., M, D) from whitened draws v (..., D, M)."""
    chols = model.Kzz_chols()
    cols = []
    for d in range(model.latent_dim):
        gp = model.gp(d)
        cols.append(gp.mean_fn(gp.Z) + v[..., d, :] @ chols[d].T)
    return jnp.stack(cols, -1)


def whiten_u(model, u):
    chols = model.Kzz_chols()
    rows = []
    for d in range(model.latent_dim):
        gp = model.gp(d)
        rows.append(jsl.solve_triangular(chols[d], (u[..., :, d] - gp.mean_fn(gp.Z)).T, lower=True).T)
    return jnp.stack(rows, -2)


def sample_posterior(spec, model, controls=None, T=None, rng_seed=0, n_samples=None) -> TrajectorySample:
    """Sample trajectories from q(X | .) with their log densities.

    With ``n_samples=None`` one trajectory is returned with unbatched arrays.
    ``log_density_q`` is the density of the states given the trajectory's
    own context (u for the u-conditioned variants, the sampled f-values for
    the chunked one), and the marginal density for the factorised variants.
    """
    T = spec.T if T is None else T
    c = _check(spec, model, controls, T)
    n = 1 if n_samples is None else n_samples
    noise = draw_noise(jax.random.PRNGKey(rng_seed), n, T, model.latent_dim, model.num_inducing)
    out = _simulate_jit(spec, model, c, noise)
    u = None
    if spec.variant.uses_u_draw and not spec.biased_independent_f:
        u = np.asarray(unwhiten_u(model, out["v"]))
    fv = np.asarray(out["f"]) if T > 1 else None
    sample = TrajectorySample(
        states=np.asarray(out["states"]),
        function_values=fv,
        inducing_draw=u,
        log_density_q=np.asarray(out["log_q"]),
    )
    if n_samples is None:
        sample = TrajectorySample(
            states=sample.states[0],
            function_values=None if fv is None else fv[0],
            inducing_draw=None if u is None else u[0],
            log_density_q=float(sample.log_density_q[0]),
        )
    return sample


def _context_arrays(spec, model, x_t, context):
    x = jnp.atleast_2d(jnp.asarray(x_t, dtype=float))
    v = f = None
    if spec.variant.uses_u_draw and not spec.biased_independent_f:
        if context is None:
            raise ValueError(f"{spec.variant.value} needs a sampled u (M, D) as context")
        u = jnp.asarray(context, dtype=float)
        v = whiten_u(model, u)[None]
    elif spec.variant is Variant.NONFACTORISED_CHUNKED:
        if context is None:
            raise ValueError("chunked variant needs the sampled f(x_t) as context")
        f = jnp.atleast_2d(jnp.asarray(context, dtype=float))
    if x.shape[1] != model.latent_dim:
        raise DimensionMismatch(f"x_t has {x.shape[1]} entries, model has D={model.latent_dim}")
    return x, v, f


def step_log_density(spec, model, t, x_t, context, x_next, control=None) -> float:
    """log q(x_{t+1} | context, x_t) for transition index ``t`` (0-based)."""
    x, v, f = _context_arrays(spec, model, x_t, context)
    c = None if control is None else jnp.asarray(control, dtype=float)
    mq, Lq, *_ = transition_moments(spec, model, t, x, model.Kzz_chols(), c, v=v, f=f)
    xn = jnp.atleast_2d(jnp.asarray(x_next, dtype=float))
    return float(mvn_logpdf_chol(xn, mq, Lq)[0])


def step_distribution(spec, model, t, x_t, context=None, control=None) -> GaussianDist:
    x, v, f = _context_arrays(spec, model, x_t, context)
    c = None if control is None else jnp.asarray(control, dtype=float)
    mq, Lq, *_ = transition_moments(spec, model, t, x, model.Kzz_chols(), c, v=v, f=f)
    return GaussianDist(np.asarray(mq[0]), PsdMatrix(np.asarray(Lq[0])))


def transition_kl_term(spec, model, t, x_t, context=None, control=None) -> float:
    """E_f KL[q(x_{t+1} | ., x_t) || p(x_{t+1} | f, x_t)] for one sampled context."""
    x, v, f = _context_arrays(spec, model, x_t, context)
    c = None if control is None else jnp.asarray(control, dtype=float)
    kl = transition_moments(spec, model, t, x, model.Kzz_chols(), c, v=v, f=f)[2]
    return float(kl[0])


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "gpssm-checkpoint"
CHECKPOINT_VERSION = 1


def _key(path):
    return jax.tree_util.keystr(path, simple=True, separator="/")


def _describe(obj):
    return {"class": type(obj).__name__, **{
        f.name: getattr(obj, f.name)
        for f in obj.__dataclass_fields__.values()
        if f.metadata.get("static")
    }}


def save_checkpoint(path, model: GpssmModel, spec: PosteriorSpec | None = None, extra=None):
    """Write model (and optionally posterior) parameters to one ``.npz`` file.

    Array keys are ``model/<field path>`` and ``posterior/<field path>``,
    mirroring the dataclass field names (``model/raw_Q``,
    ``posterior/A``, ...). Unconstrained ``raw_*`` arrays map to their
    constrained values through softplus (diagonal of ``*_chol_raw`` /
    ``q_sqrt_raw`` only). ``__meta__`` holds a JSON header with the format
    name, version and static fields needed to rebuild the objects.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": {
            "control_dim": model.control_dim,
            "jitter": model.jitter,
            "kernels": [_describe(k) for k in model.kernels],
            "mean_fns": [_describe(m) for m in model.mean_fns],
        },
        "extra": extra or {},
    }
    arrays = {}
    for p, leaf in jax.tree_util.tree_flatten_with_path(model)[0]:
        arrays["model/" + _key(p)] = np.asarray(leaf)
    if spec is not None:
        meta["posterior"] = {
            "variant": spec.variant.value,
            "chunk_length": spec.chunk_length,
            "biased_independent_f": spec.biased_independent_f,
        }
        for p, leaf in jax.tree_util.tree_flatten_with_path(spec)[0]:
            arrays["posterior/" + _key(p)] = np.asarray(leaf)
    arrays["__meta__"] = np.array(json.dumps(meta, default=str))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _rebuild(desc):
    from . import kernels as K

    classes = {c.__name__: c for c in (K.SquaredExponentialARD, K.Linear, K.ZeroMean, K.IdentityMean, K.AffineMean)}
    try:
        from .data import KinkMean

        classes["KinkMean"] = KinkMean
    except ImportError:  # pragma: no cover
        pass
    cls = classes[desc["class"]]
    statics = {k: v for k, v in desc.items() if k != "class"}
    dynamic = [f.name for f in cls.__dataclass_fields__.values() if not f.metadata.get("static")]
    return cls(**{name: 0.0 for name in dynamic}, **statics)


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(model, spec_or_None, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a gpssm checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    mm = meta["model"]
    skeleton = GpssmModel(
        kernels=tuple(_rebuild(k) for k in mm["kernels"]),
        mean_fns=tuple(_rebuild(m) for m in mm["mean_fns"]),
        Z=0.0, q_mu=0.0, q_sqrt_raw=0.0, raw_Q=0.0,
        emission=_emission_skeleton(),
        px1_mean=0.0, px1_chol_raw=0.0,
        control_dim=mm["control_dim"], jitter=mm["jitter"],
    )
    model = _fill(skeleton, arrays, "model/")
    spec = None
    if "posterior" in meta:
        pm = meta["posterior"]
        spec_skel = PosteriorSpec(
            *([0.0] * 7),
            variant=Variant(pm["variant"]),
            chunk_length=pm["chunk_length"],
            biased_independent_f=pm["biased_independent_f"],
        )
        spec = _fill(spec_skel, arrays, "posterior/")
    return model, spec, meta.get("extra", {})


def _emission_skeleton():
    from .model import EmissionModel

    return EmissionModel(0.0, 0.0, 0.0)


def _fill(skeleton, arrays, prefix):
    paths, treedef = jax.tree_util.tree_flatten_with_path(skeleton)
    leaves = []
    for p, _ in paths:
        key = prefix + _key(p)
        if key not in arrays:
            raise ValueError(f"checkpoint is missing array {key!r}")
        leaves.append(jnp.asarray(arrays[key]))
    return jax.tree_util.tree_unflatten(treedef, leaves)


def warm_start(spec_from: PosteriorSpec | None, variant, model, observations, chunk_length=None, **kwargs):
    """Posterior for ``variant`` reusing every shape-compatible parameter of ``spec_from``."""
    fresh = initial_posterior(variant, model, observations, chunk_length=chunk_length, **kwargs)
    if spec_from is None:
        return fresh
    shared = {}
    for name in ("q_x1_mean", "q_x1_chol_raw", "A", "b", "raw_S"):
        old, new = getattr(spec_from, name), getattr(fresh, name)
        if old.shape == new.shape:
            shared[name] = old
    return replace(fresh, **shared)
