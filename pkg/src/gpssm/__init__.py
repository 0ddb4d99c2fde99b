"""Variational inference for Gaussian process state-space models."""

import jax

jax.config.update("jax_enable_x64", True)

from .linalg import (  # noqa: E402
    GaussianDist,
    PsdMatrix,
    cholesky,
    gaussian_kl,
    gaussian_log_density,
    tri_solve,
)
from .kernels import (  # noqa: E402
    AffineMean,
    ConditioningState,
    IdentityMean,
    Linear,
    SparseGP,
    SquaredExponentialARD,
    ZeroMean,
)
from .model import EmissionModel, GpssmModel, TrajectorySample  # noqa: E402
from .posteriors import PosteriorSpec, Variant  # noqa: E402
from .inference import ElboEstimate, TrainConfig, elbo, elbo_gradient, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AffineMean",
    "ConditioningState",
    "ElboEstimate",
    "EmissionModel",
    "GaussianDist",
    "GpssmModel",
    "IdentityMean",
    "Linear",
    "PosteriorSpec",
    "PsdMatrix",
    "SparseGP",
    "SquaredExponentialARD",
    "TrainConfig",
    "TrajectorySample",
    "Variant",
    "ZeroMean",
    "cholesky",
    "elbo",
    "elbo_gradient",
    "gaussian_kl",
    "gaussian_log_density",
    "train",
    "tri_solve",
]
