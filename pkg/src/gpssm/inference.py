"""Monte Carlo ELBO, its reparameterised gradient and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
import optax

from .errors import DimensionMismatch, NonFiniteGradient, NonFiniteObjective, NumericalError
from .linalg import kl_chol
from .model import GpssmModel
from .posteriors import PosteriorSpec, draw_noise, simulate

log = logging.getLogger(__name__)

TERMS = ("expected_log_lik", "kl_u", "kl_x1", "expected_transition_kl")

PARAM_GROUPS = (
    "emission",
    "process_noise",
    "kernel",
    "mean_function",
    "inducing_inputs",
    "variational",
    "initial_state",
)
HYPER_GROUPS = frozenset(PARAM_GROUPS) - {"variational"}


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    per_term: dict
    n_samples: int
    std_error: float

    def row(self):
        return {"elbo": self.value, **self.per_term}


class TrainingAborted(NumericalError):
    """Raised after too many consecutive non-finite steps; carries the last finite parameters."""

    def __init__(self, message, model, spec, trace):
        super().__init__(message)
        self.model = model
        self.spec = spec
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    n_mc_samples: int = 100
    max_iterations: int = 1000
    lr_variational: float = 1e-2
    lr_hyper: float = 1e-3
    frozen: frozenset = field(default_factory=lambda: frozenset({"initial_state"}))
    rng_seed: int = 0
    convergence_window: int = 200
    convergence_tol: float = 1e-6
    max_nan_steps: int = 3
    log_every: int = 0
    sample_clip: float | None = 5.0

    def __post_init__(self):
        if self.n_mc_samples < 1:
            raise ValueError("n_mc_samples must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not (self.lr_variational > 0 and self.lr_hyper > 0):
            raise ValueError("step sizes must be positive")
        if self.sample_clip is not None and not self.sample_clip > 0:
            raise ValueError("sample_clip must be positive or None")
        frozen = frozenset(self.frozen)
        unknown = frozen - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}; valid: {PARAM_GROUPS}")
        object.__setattr__(self, "frozen", frozen)


# ---------------------------------------------------------------------------
# objective


def unpack_dataset(dataset):
    """(observations, controls) from a ``TimeSeriesDataset``, a tuple or a bare array."""
    if hasattr(dataset, "observations"):
        return np.asarray(dataset.observations, dtype=float), dataset.controls
    if isinstance(dataset, tuple):
        Y, c = dataset
        return np.atleast_2d(np.asarray(Y, dtype=float)), c
    Y = np.asarray(dataset, dtype=float)
    return (Y[:, None] if Y.ndim == 1 else Y), None


def _prepare(model, spec, dataset):
    Y, controls = unpack_dataset(dataset)
    T = Y.shape[0]
    if T < 1:
        raise ValueError("dataset must contain at least one observation")
    if Y.shape[1] != model.emission.obs_dim:
        raise DimensionMismatch(f"observations have {Y.shape[1]} columns, emission expects {model.emission.obs_dim}")
    if spec.T != T:
        raise DimensionMismatch(f"posterior covers T={spec.T}, dataset has T={T}")
    if spec.latent_dim != model.latent_dim:
        raise DimensionMismatch(f"posterior has D={spec.latent_dim}, model has D={model.latent_dim}")
    c = None
    if model.control_dim:
        if controls is None:
            raise DimensionMismatch("model expects control inputs")
        c = jnp.asarray(controls, dtype=float)
        if c.ndim != 2 or c.shape[0] < T - 1 or c.shape[1] != model.control_dim:
            raise DimensionMismatch(f"controls must be ({T - 1}, {model.control_dim}), got {c.shape}")
        c = c[: T - 1]
    return jnp.asarray(Y), c


def elbo_samples(model: GpssmModel, spec: PosteriorSpec, Y, controls, noise):
    """Per-trajectory ELBO contributions; ``value`` has one entry per trajectory."""
    out = simulate(spec, model, controls, noise)
    ll = jnp.sum(model.emission.log_prob(Y[None], out["states"]), axis=-1)
    trans = jnp.sum(out["trans_kl"], axis=-1)
    kl_u = model.kl_u()
    kl_x1 = kl_chol(spec.q_x1_mean, spec.q_x1_chol, model.px1_mean, model.px1_chol)
    return dict(
        value=ll - trans - kl_u - kl_x1,
        expected_log_lik=ll,
        expected_transition_kl=trans,
        kl_u=kl_u,
        kl_x1=kl_x1,
    )


def _mean_elbo(params, Y, controls, noise):
    model, spec = params
    terms = elbo_samples(model, spec, Y, controls, noise)
    return jnp.mean(terms["value"]), terms


def _trajectory_part(params, Y, controls, noise_one):
    model, spec = params
    one = jax.tree_util.tree_map(lambda a: a[None], noise_one)
    out = simulate(spec, model, controls, one)
    ll = jnp.sum(model.emission.log_prob(Y[None], out["states"]), axis=-1)
    return (ll - jnp.sum(out["trans_kl"], axis=-1))[0]


def _global_kl(params):
    model, spec = params
    return -model.kl_u() - kl_chol(spec.q_x1_mean, spec.q_x1_chol, model.px1_mean, model.px1_chol)


def _tree_norms(tree):
    return jnp.sqrt(sum(jnp.sum(g.reshape(g.shape[0], -1) ** 2, axis=1) for g in jax.tree_util.tree_leaves(tree)))


def clipped_gradient(params, Y, controls, noise, clip):
    """ELBO gradient with every trajectory's pathwise contribution capped at ``clip`` x the batch median norm.

    Backpropagating through long trajectories of an expanding map gives rare
    per-trajectory gradients many orders of magnitude above the rest; capping
    them relative to the median keeps the step direction set by the bulk of
    the batch. The sample-free KL terms are differentiated exactly.
    """
    per = jax.vmap(jax.grad(_trajectory_part), in_axes=(None, None, None, 0))(params, Y, controls, noise)
    norms = _tree_norms(per)
    scale = jnp.minimum(1.0, clip * jnp.median(norms) / jnp.maximum(norms, 1e-300))
    g_kl = jax.grad(_global_kl)(params)
    return jax.tree_util.tree_map(
        lambda g, k: jnp.tensordot(scale, g, axes=1) / scale.shape[0] + k, per, g_kl
    )


_terms_jit = jax.jit(elbo_samples)
_value_and_grad = jax.jit(jax.value_and_grad(_mean_elbo, has_aux=True))


def _noise(model, spec, key, n):
    return draw_noise(key, n, spec.T, model.latent_dim, model.num_inducing)


def _summarise(terms, n):
    values = np.asarray(terms["value"])
    per_term = {
        "expected_log_lik": float(np.mean(np.asarray(terms["expected_log_lik"]))),
        "kl_u": float(terms["kl_u"]),
        "kl_x1": float(terms["kl_x1"]),
        "expected_transition_kl": float(np.mean(np.asarray(terms["expected_transition_kl"]))),
    }
    for name, v in per_term.items():
        if not np.isfinite(v):
            raise NonFiniteObjective(name)
    value = per_term["expected_log_lik"] - per_term["kl_u"] - per_term["kl_x1"] - per_term["expected_transition_kl"]
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ElboEstimate(value=value, per_term=per_term, n_samples=n, std_error=se)


def elbo(model, spec, dataset, n_samples=100, rng_seed=0) -> ElboEstimate:
    """Unbiased Monte Carlo estimate of the bound from ``n_samples`` posterior trajectories."""
    Y, c = _prepare(model, spec, dataset)
    noise = _noise(model, spec, jax.random.PRNGKey(rng_seed), n_samples)
    return _summarise(_terms_jit(model, spec, Y, c, noise), n_samples)


# ---------------------------------------------------------------------------
# parameter groups and gradients


def _group_of(path):
    keys = [getattr(k, "name", getattr(k, "key", getattr(k, "idx", None))) for k in path]
    root, rest = keys[0], keys[1:]
    if root == 1:  # posterior spec
        return "variational"
    head = rest[0]
    if head == "emission":
        return "emission"
    if head == "raw_Q":
        return "process_noise"
    if head == "kernels":
        return "kernel"
    if head == "mean_fns":
        return "mean_function"
    if head == "Z":
        return "inducing_inputs"
    if head in ("q_mu", "q_sqrt_raw"):
        return "variational"
    if head in ("px1_mean", "px1_chol_raw"):
        return "initial_state"
    raise KeyError(f"no parameter group for {path}")


def param_labels(model, spec):
    """A pytree matching ``(model, spec)`` with each leaf replaced by its group name."""
    return jax.tree_util.tree_map_with_path(lambda p, _: _group_of(p), (model, spec))


def parameter_paths(model, spec):
    return [
        ("model" if p[0].idx == 0 else "posterior") + jax.tree_util.keystr(p[1:])
        for p, _ in jax.tree_util.tree_flatten_with_path((model, spec))[0]
    ]


def _zero_frozen(grads, labels, frozen):
    return jax.tree_util.tree_map(lambda g, lab: jnp.zeros_like(g) if lab in frozen else g, grads, labels)


def _check_grads(grads):
    for p, g in jax.tree_util.tree_flatten_with_path(grads)[0]:
        if not np.all(np.isfinite(np.asarray(g))):
            raise NonFiniteGradient(("model" if p[0].idx == 0 else "posterior") + jax.tree_util.keystr(p[1:]))


def elbo_gradient(model, spec, dataset, n_samples=100, rng_seed=0, frozen=()):
    """Gradient of the ``n_samples`` ELBO estimate at fixed noise, as ``(d_model, d_spec)``.

    Leaves in ``frozen`` groups come back as zeros. Gradients are with respect
    to the stored unconstrained arrays (``raw_*`` fields are softplus inputs).
    """
    Y, c = _prepare(model, spec, dataset)
    noise = _noise(model, spec, jax.random.PRNGKey(rng_seed), n_samples)
    (_, _), grads = _value_and_grad((model, spec), Y, c, noise)
    grads = _zero_frozen(grads, param_labels(model, spec), frozenset(frozen))
    _check_grads(grads)
    return grads


def elbo_at_noise(model, spec, dataset, n_samples, rng_seed):
    """Mean ELBO estimate as a plain float, using exactly the noise ``elbo_gradient`` uses."""
    Y, c = _prepare(model, spec, dataset)
    noise = _noise(model, spec, jax.random.PRNGKey(rng_seed), n_samples)
    return float(jnp.mean(_terms_jit(model, spec, Y, c, noise)["value"]))


# ---------------------------------------------------------------------------
# training


def make_optimizer(labels, config: TrainConfig):
    transforms = {}
    for g in PARAM_GROUPS:
        if g in config.frozen:
            transforms[g] = optax.set_to_zero()
        elif g == "variational":
            transforms[g] = optax.adam(config.lr_variational)
        else:
            transforms[g] = optax.adam(config.lr_hyper)
    return optax.multi_transform(transforms, labels)


def _converged(values, window, tol):
    if window <= 0 or len(values) < 2 * window:
        return False
    prev = float(np.mean(values[-2 * window : -window]))
    last = float(np.mean(values[-window:]))
    return (last - prev) / max(abs(prev), 1e-300) < tol


def train(model, spec, dataset, config: TrainConfig = TrainConfig(), callback=None):
    """Adam ascent on the ELBO with fresh noise every iteration.

    Returns ``(model, spec, trace)`` where ``trace`` is a list of dicts with
    keys ``iteration``, ``elbo``, the four term names and ``wall_ms``. Entry 0
    is the objective at the initial parameters.
    """
    Y, c = _prepare(model, spec, dataset)
    params = (model, spec)
    labels = param_labels(model, spec)
    opt = make_optimizer(labels, config)
    opt_state = opt.init(params)
    n = config.n_mc_samples
    base_key = jax.random.PRNGKey(config.rng_seed)

    @jax.jit
    def step(params, opt_state, key):
        noise = draw_noise(key, n, spec.T, model.latent_dim, model.num_inducing)
        if config.sample_clip is None:
            (value, terms), grads = jax.value_and_grad(_mean_elbo, has_aux=True)(params, Y, c, noise)
        else:
            value, terms = _mean_elbo(params, Y, c, noise)
            grads = clipped_gradient(params, Y, c, noise, config.sample_clip)
        ascent = jax.tree_util.tree_map(lambda g: -g, grads)
        updates, new_state = opt.update(ascent, opt_state, params)
        finite = jnp.isfinite(value) & jnp.all(
            jnp.stack([jnp.all(jnp.isfinite(g)) for g in jax.tree_util.tree_leaves(grads)])
        )
        return optax.apply_updates(params, updates), new_state, terms, finite

    trace = []
    t0 = time.perf_counter()

    def record(it, terms):
        est = _summarise(terms, n)
        trace.append({"iteration": it, **est.row(), "wall_ms": 1e3 * (time.perf_counter() - t0)})
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d elbo %.4f", it, est.value)
        if callback is not None:
            callback(it, params[0], params[1], est)

    key0 = jax.random.fold_in(base_key, 0)
    record(0, _terms_jit(model, spec, Y, c, draw_noise(key0, n, spec.T, model.latent_dim, model.num_inducing)))
    values = []
    bad = 0
    for it in range(1, config.max_iterations + 1):
        new_params, new_state, terms, finite = step(params, opt_state, jax.random.fold_in(base_key, it))
        if not bool(finite):
            bad += 1
            log.warning("non-finite objective or gradient at iteration %d (%d in a row)", it, bad)
            if bad > config.max_nan_steps:
                raise TrainingAborted(
                    f"{bad} consecutive non-finite steps at iteration {it}", params[0], params[1], trace
                )
            continue
        bad = 0
        # the terms were evaluated at the pre-update parameters
        record(it, terms)
        params, opt_state = new_params, new_state
        values.append(trace[-1]["elbo"])
        if _converged(values, config.convergence_window, config.convergence_tol):
            log.info("converged at iteration %d", it)
            break
    return params[0], params[1], trace


TRACE_COLUMNS = ("iteration", "elbo") + TERMS + ("wall_ms",)


def write_trace(path, trace, include_wall_time=True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            vals = [row[k] for k in TRACE_COLUMNS]
            if not include_wall_time:
                vals[-1] = float("nan")
            w.writerow([vals[0]] + [repr(float(v)) for v in vals[1:]])
