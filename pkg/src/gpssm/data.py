"""Datasets, the kink benchmark, experiment configuration and the end-to-end runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import yaml

from .errors import ConfigError, DegenerateColumn, DimensionMismatch, ParseError, SchemaMismatch
from .model import GpssmModel, rng_streams

log = logging.getLogger(__name__)

pytree = jax.tree_util.register_dataclass


# ---------------------------------------------------------------------------
# kink benchmark


def kink_function(x):
    """0.8 + (x + 0.2)(1 - 5 / (1 + exp(-2x))); works on scalars and arrays, numpy or jax."""
    xp = jnp if isinstance(x, jax.Array) else np
    return 0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + xp.exp(-2.0 * x)))


@pytree
@dataclass(frozen=True)
class KinkMean:
    """Mean function applying the kink map to input coordinate ``input_index``."""

    input_index: int = field(default=0, metadata=dict(static=True))

    def __call__(self, X):
        return kink_function(jnp.asarray(X)[..., self.input_index])

    def numpy_call(self, x):
        # numpy evaluation for the eager samplers; jnp.exp and np.exp differ in the last bit
        i = self.input_index
        return float(kink_function(np.asarray(x, dtype=float)[i : i + 1])[0])


KINK_PROCESS_SD = 0.05
KINK_OBS_SD = math.sqrt(0.8)


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Observations (T, E) with optional controls stored row-aligned as (T, D_c).

    Transition t -> t+1 is driven by control row t, so only the first T - 1
    rows enter a model fitted on this sequence; the last row drives the first
    step of a forecast. ``obs_mean``/``obs_std`` (and the control versions)
    are the statistics already applied, identity when not normalised.
    """

    observations: np.ndarray
    controls: np.ndarray | None = None
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)
    obs_mean: np.ndarray | None = None
    obs_std: np.ndarray | None = None
    ctrl_mean: np.ndarray | None = None
    ctrl_std: np.ndarray | None = None

    def __post_init__(self):
        Y = np.asarray(self.observations, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        object.__setattr__(self, "observations", Y)
        E = Y.shape[1]
        if self.controls is not None:
            c = np.asarray(self.controls, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] not in (Y.shape[0], Y.shape[0] - 1):
                raise DimensionMismatch(f"controls have {c.shape[0]} rows for T={Y.shape[0]}")
            object.__setattr__(self, "controls", c)
        if self.obs_mean is None:
            object.__setattr__(self, "obs_mean", np.zeros(E))
            object.__setattr__(self, "obs_std", np.ones(E))
        if self.controls is not None and self.ctrl_mean is None:
            object.__setattr__(self, "ctrl_mean", np.zeros(self.controls.shape[1]))
            object.__setattr__(self, "ctrl_std", np.ones(self.controls.shape[1]))

    @property
    def T(self):
        return self.observations.shape[0]

    @property
    def obs_dim(self):
        return self.observations.shape[1]

    @property
    def control_dim(self):
        return 0 if self.controls is None else self.controls.shape[1]

    def statistics(self):
        """Per-column (mean, std) of the stored values; raises on constant columns."""
        obs = _column_stats(self.observations, "observation")
        ctrl = None if self.controls is None else _column_stats(self.controls, "control")
        return obs, ctrl

    def normalise(self, stats=None) -> "TimeSeriesDataset":
        """Standardise columns with ``stats`` (default: this dataset's own) on top of any existing scaling."""
        (om, osd), ctrl = self.statistics() if stats is None else stats
        Y = (self.observations - om) / osd
        c = None
        cm = csd = None
        if self.controls is not None:
            m_c, s_c = ctrl
            c = (self.controls - m_c) / s_c
            cm = self.ctrl_mean + self.ctrl_std * m_c
            csd = self.ctrl_std * s_c
        return replace(
            self,
            observations=Y,
            controls=c,
            obs_mean=self.obs_mean + self.obs_std * om,
            obs_std=self.obs_std * osd,
            ctrl_mean=cm,
            ctrl_std=csd,
        )

    def denormalise(self, Y=None):
        """Map normalised observations (default: the stored ones) back to raw units."""
        Y = self.observations if Y is None else np.asarray(Y, dtype=float)
        return Y * self.obs_std + self.obs_mean

    def slice(self, start, stop) -> "TimeSeriesDataset":
        c = None if self.controls is None else self.controls[start:stop]
        return replace(self, observations=self.observations[start:stop], controls=c)

    def split(self, n_train) -> tuple["TimeSeriesDataset", "TimeSeriesDataset"]:
        return self.slice(0, n_train), self.slice(n_train, self.T)


def _column_stats(M, kind):
    mean = M.mean(axis=0)
    std = M.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise DegenerateColumn(f"{kind} column(s) {bad.tolist()} have zero variance and cannot be normalised")
    return mean, std


def generate_kink_dataset(T=120, process_sd=KINK_PROCESS_SD, obs_sd=KINK_OBS_SD, seed=0):
    """Simulate the kink system; returns ``(dataset, true_states)`` with states of shape (T, 1).

    Uses the same spawned streams as the exact prior sampler (initial state,
    process noise, function values, then observation noise), so a
    zero-variance kink-mean GPSSM reproduces these latent paths exactly.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    init_rng, proc_rng, _fn_rng, obs_rng = rng_streams(seed, 4)
    x = np.empty((T, 1))
    x[0] = init_rng.standard_normal(1)
    for t in range(T - 1):
        x[t + 1] = kink_function(x[t]) + process_sd * proc_rng.standard_normal(1)
    y = x + obs_sd * obs_rng.standard_normal((T, 1))
    ds = TimeSeriesDataset(
        observations=y,
        name="kink",
        provenance={"generator": "kink", "T": T, "process_sd": process_sd, "obs_sd": obs_sd, "seed": seed},
    )
    return ds, x


def kink_emission():
    """The generative kink emission (C, d, R)."""
    return np.array([[1.0]]), np.zeros(1), np.array([KINK_OBS_SD**2])


# ---------------------------------------------------------------------------
# delimited text files


@dataclass(frozen=True)
class CsvSchema:
    """Which columns hold observations and controls.

    Columns are header names when ``header`` is true, else 0-based indices.
    """

    observation_columns: tuple
    control_columns: tuple = ()
    delimiter: str = ","
    header: bool = True


def _read_table(path, schema: CsvSchema):
    text = Path(path).read_text()
    rows = []
    lines = text.splitlines()
    names = None
    width = None
    delim = None if schema.delimiter in (" ", "whitespace") else schema.delimiter
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in (line.split(delim) if delim else line.split())]
        if schema.header and names is None:
            names = cells
            width = len(cells)
            continue
        if width is None:
            width = len(cells)
        if len(cells) != width:
            raise ParseError(f"expected {width} columns, found {len(cells)}", line=lineno)
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise ParseError(f"non-numeric value in {line.strip()!r}", line=lineno) from None
    if not rows:
        raise ParseError("file contains no data rows")
    return names, np.array(rows)


def _select(names, table, columns, kind):
    idx = []
    for col in columns:
        if names is not None and not isinstance(col, int):
            if col not in names:
                raise SchemaMismatch(f"{kind} column {col!r} not in header {names}")
            idx.append(names.index(col))
        else:
            i = int(col)
            if not 0 <= i < table.shape[1]:
                raise SchemaMismatch(f"{kind} column index {i} out of range for {table.shape[1]} columns")
            idx.append(i)
    return table[:, idx]


def load_csv_dataset(path, schema: CsvSchema, train_fraction=0.5, normalise=True, name=None):
    """Load a delimited file and split it into ``(train, test)`` datasets.

    Normalisation uses the training part's statistics for both parts, and is
    applied to controls as well as observations.
    """
    if not schema.observation_columns:
        raise SchemaMismatch("schema lists no observation columns")
    names, table = _read_table(path, schema)
    Y = _select(names, table, schema.observation_columns, "observation")
    C = _select(names, table, schema.control_columns, "control") if schema.control_columns else None
    ds = TimeSeriesDataset(
        observations=Y,
        controls=C,
        name=name or Path(path).stem,
        provenance={"path": str(path), "schema": dataclasses.asdict(schema)},
    )
    n_train = int(math.floor(train_fraction * ds.T))
    if not 1 <= n_train <= ds.T:
        raise ConfigError(f"train fraction {train_fraction} leaves no training data for T={ds.T}")
    train, test = ds.split(n_train)
    if normalise:
        stats = train.statistics()
        train, test = train.normalise(stats), test.normalise(stats)
    return train, test


def write_csv_dataset(path, dataset: TimeSeriesDataset, obs_names=None, ctrl_names=None, delimiter=","):
    """Write raw (denormalised) values with a header; controls follow observations."""
    Y = dataset.denormalise()
    cols = [Y]
    names = list(obs_names or [f"y{i}" for i in range(dataset.obs_dim)])
    if dataset.controls is not None:
        cols.append(dataset.controls * dataset.ctrl_std + dataset.ctrl_mean)
        names += list(ctrl_names or [f"u{i}" for i in range(dataset.control_dim)])
    table = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(names)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    return CsvSchema(
        tuple(names[: dataset.obs_dim]), tuple(names[dataset.obs_dim :]), delimiter=delimiter, header=True
    )


# ---------------------------------------------------------------------------
# experiment configuration


def _from_mapping(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})


@dataclass(frozen=True)
class KinkSource:
    T: int = 150
    train_length: int = 120
    process_sd: float = KINK_PROCESS_SD
    obs_sd: float = KINK_OBS_SD
    seed: int = 0


@dataclass(frozen=True)
class CsvSource:
    path: str = ""
    observation_columns: tuple = ()
    control_columns: tuple = ()
    delimiter: str = ","
    header: bool = True
    train_fraction: float = 0.5
    normalise: bool = True


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "kink"
    kink: KinkSource = field(default_factory=KinkSource)
    csv: CsvSource = field(default_factory=CsvSource)


@dataclass(frozen=True)
class EmissionConfig:
    mode: str = "fixed"  # fixed: use C, d, R below (kink truth when unset); learned: free
    C: tuple | None = None
    d: tuple | None = None
    R: tuple | float | None = None


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 1
    n_inducing: int = 20
    kernel: str = "se"
    mean: str = "identity"
    variance: float = 1.0
    lengthscales: float = 1.0
    process_noise: float = 0.01
    inducing_init: str = "auto"  # auto: grid over the data range for 1-D inputs, else standard normal
    emission: EmissionConfig = field(default_factory=EmissionConfig)


@dataclass(frozen=True)
class PosteriorConfig:
    variant: str = "vcdt"
    chunk_length: int | None = None
    tie_across_time: bool = False
    biased_independent_f: bool = False
    warm_start_variant: str | None = None
    warm_start_iterations: int = 0


@dataclass(frozen=True)
class TrainSettings:
    n_mc_samples: int = 100
    max_iterations: int = 2000
    lr_variational: float = 1e-2
    lr_hyper: float = 1e-3
    frozen: tuple = ("initial_state",)
    rng_seed: int = 0
    convergence_window: int = 200
    convergence_tol: float = 1e-6

    def to_train_config(self, **overrides):
        from .inference import TrainConfig

        kw = dataclasses.asdict(self)
        kw["frozen"] = frozenset(kw["frozen"])
        kw.update(overrides)
        return TrainConfig(**kw)


@dataclass(frozen=True)
class PredictionConfig:
    horizon: int = 30
    n_samples: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    record_wall_time: bool = True
    figures: bool = True
    posterior_samples: int = 1000
    grid_points: int = 200


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "posterior": PosteriorConfig,
    "train": TrainSettings,
    "prediction": PredictionConfig,
    "output": OutputConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    posterior: PosteriorConfig = field(default_factory=PosteriorConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        unknown = set(data) - set(_SECTIONS) - {"name"}
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        ds = data.get("dataset") or {}
        if not isinstance(ds, dict):
            raise ConfigError("dataset must be a mapping")
        dataset = _from_mapping(
            DatasetConfig,
            {
                **ds,
                "kink": _from_mapping(KinkSource, ds.get("kink"), "dataset.kink"),
                "csv": _from_mapping(CsvSource, ds.get("csv"), "dataset.csv"),
            },
            "dataset",
        )
        md = data.get("model") or {}
        if not isinstance(md, dict):
            raise ConfigError("model must be a mapping")
        model = _from_mapping(
            ModelConfig,
            {**md, "emission": _from_mapping(EmissionConfig, md.get("emission"), "model.emission")},
            "model",
        )
        cfg = cls(
            name=str(data.get("name", "experiment")),
            dataset=dataset,
            model=model,
            posterior=_from_mapping(PosteriorConfig, data.get("posterior"), "posterior"),
            train=_from_mapping(TrainSettings, data.get("train"), "train"),
            prediction=_from_mapping(PredictionConfig, data.get("prediction"), "prediction"),
            output=_from_mapping(OutputConfig, data.get("output"), "output"),
        )
        cfg.validate()
        return cfg

    def to_dict(self):
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            return obj

        return clean(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            line = getattr(getattr(exc, "problem_mark", None), "line", None)
            raise ParseError(f"invalid YAML: {exc}", line=None if line is None else line + 1) from None
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_yaml(text)

    def save(self, path):
        Path(path).write_text(self.to_yaml())

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def validate(self):
        from .inference import PARAM_GROUPS
        from .posteriors import Variant

        try:
            variant = Variant.parse(self.posterior.variant)
            if self.posterior.warm_start_variant:
                Variant.parse(self.posterior.warm_start_variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if variant is Variant.NONFACTORISED_CHUNKED and not (self.posterior.chunk_length or 0) >= 1:
            raise ConfigError("nonfactorised_chunked needs chunk_length >= 1")
        if self.posterior.biased_independent_f and variant is not Variant.PRSSM:
            raise ConfigError("biased_independent_f only applies to the prssm variant")
        if self.model.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.model.n_inducing < 1:
            raise ConfigError("n_inducing must be >= 1")
        if self.model.kernel not in ("se", "linear"):
            raise ConfigError(f"unknown kernel {self.model.kernel!r}")
        if self.model.mean not in ("identity", "zero", "kink"):
            raise ConfigError(f"unknown mean function {self.model.mean!r}")
        if self.model.emission.mode not in ("fixed", "learned"):
            raise ConfigError(f"emission mode must be 'fixed' or 'learned', got {self.model.emission.mode!r}")
        if self.model.inducing_init not in ("auto", "grid", "normal"):
            raise ConfigError(f"unknown inducing_init {self.model.inducing_init!r}")
        if self.dataset.source == "csv":
            if not self.dataset.csv.path:
                raise ConfigError("dataset.csv.path is required for csv sources")
            if not Path(self.dataset.csv.path).exists():
                raise ConfigError(f"dataset file {self.dataset.csv.path} does not exist")
            if not self.dataset.csv.observation_columns:
                raise ConfigError("dataset.csv.observation_columns must not be empty")
        elif self.dataset.source == "kink":
            k = self.dataset.kink
            if not 1 <= k.train_length <= k.T:
                raise ConfigError("dataset.kink.train_length must be within [1, T]")
            if self.model.latent_dim != 1:
                raise ConfigError("the kink system has a one-dimensional latent state")
        else:
            raise ConfigError(f"unknown dataset source {self.dataset.source!r}")
        bad = set(self.train.frozen) - set(PARAM_GROUPS)
        if bad:
            raise ConfigError(f"unknown parameter group(s) in train.frozen: {sorted(bad)}")
        if self.train.n_mc_samples < 1 or self.train.max_iterations < 0:
            raise ConfigError("train.n_mc_samples must be >= 1 and max_iterations >= 0")
        if not (self.train.lr_variational > 0 and self.train.lr_hyper > 0):
            raise ConfigError("learning rates must be positive")
        if self.prediction.horizon < 1 or self.prediction.n_samples < 2:
            raise ConfigError("prediction needs horizon >= 1 and n_samples >= 2")

    def override(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__field=value`` style overrides (``None`` values are skipped)."""
        data = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            parts = key.split("__")
            node = data
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config field {'.'.join(parts)}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class LoadedData:
    train: TimeSeriesDataset
    test: TimeSeriesDataset
    true_states: np.ndarray | None = None


def load_experiment_data(config: ExperimentConfig) -> LoadedData:
    src = config.dataset
    if src.source == "kink":
        k = src.kink
        ds, x = generate_kink_dataset(k.T, k.process_sd, k.obs_sd, k.seed)
        train, test = ds.split(k.train_length)
        return LoadedData(train, test, x)
    c = src.csv
    schema = CsvSchema(c.observation_columns, c.control_columns, c.delimiter, c.header)
    train, test = load_csv_dataset(c.path, schema, c.train_fraction, c.normalise, name=config.name)
    return LoadedData(train, test)


def build_model(config: ExperimentConfig, train: TimeSeriesDataset) -> GpssmModel:
    mc = config.model
    D, E, Dc = mc.latent_dim, train.obs_dim, train.control_dim
    em = mc.emission
    if config.dataset.source == "kink" and em.mode == "fixed" and em.C is None:
        C, d, R = kink_emission()
    elif em.mode == "fixed" and em.C is not None:
        C = np.asarray(em.C, dtype=float).reshape(E, D)
        d = np.zeros(E) if em.d is None else np.asarray(em.d, dtype=float)
        R = np.full(E, 0.1) if em.R is None else np.broadcast_to(np.asarray(em.R, dtype=float), (E,))
    else:
        C = np.zeros((E, D))
        k = min(D, E)
        C[:k, :k] = np.eye(k)
        d, R = np.zeros(E), np.full(E, 0.1)
    M = mc.n_inducing
    rng = np.random.default_rng(config.train.rng_seed)
    grid = mc.inducing_init == "grid" or (mc.inducing_init == "auto" and D + Dc == 1)
    if grid:
        Y = train.observations
        lo, hi = float(Y.min()), float(Y.max())
        Z = np.linspace(lo, hi, M)[:, None]
        if D + Dc > 1:
            Z = np.concatenate([Z, rng.standard_normal((M, D + Dc - 1))], axis=1)
    else:
        Z = rng.standard_normal((M, D + Dc))
    model = GpssmModel.create(
        D,
        obs_dim=E,
        control_dim=Dc,
        Z=Z,
        kernel=mc.kernel,
        mean="identity" if mc.mean == "kink" else mc.mean,
        Q=mc.process_noise,
        C=C,
        d=d,
        R=R,
        variance=mc.variance,
        lengthscales=mc.lengthscales,
    )
    if mc.mean == "kink":
        model = replace(model, mean_fns=(KinkMean(),))
    return model


def _train_config(config, frozen_extra=(), **overrides):
    frozen = set(config.train.frozen) | set(frozen_extra)
    if config.model.emission.mode == "fixed":
        frozen.add("emission")
    return config.train.to_train_config(frozen=frozenset(frozen), **overrides)


def fit_model(config: ExperimentConfig, data: LoadedData):
    """Build, optionally warm start, and train; returns ``(model, spec, trace)``."""
    from .inference import train
    from .posteriors import Variant, initial_posterior, warm_start

    pc = config.posterior
    model = build_model(config, data.train)
    Y = data.train.observations
    variant = Variant.parse(pc.variant)
    kwargs = dict(tie_across_time=pc.tie_across_time)
    trace_prefix = []
    spec_from = None
    if pc.warm_start_variant and pc.warm_start_iterations > 0:
        wv = Variant.parse(pc.warm_start_variant)
        spec0 = initial_posterior(wv, model, Y, chunk_length=pc.chunk_length if wv is Variant.NONFACTORISED_CHUNKED else None, **kwargs)
        model, spec_from, trace_prefix = train(
            model, spec0, data.train, _train_config(config, max_iterations=pc.warm_start_iterations)
        )
        for row in trace_prefix:
            row["stage"] = "warm_start"
    spec = warm_start(
        spec_from,
        variant,
        model,
        Y,
        chunk_length=pc.chunk_length if variant is Variant.NONFACTORISED_CHUNKED else None,
        biased_independent_f=pc.biased_independent_f,
        **kwargs,
    )
    model, spec, trace = train(model, spec, data.train, _train_config(config))
    offset = len(trace_prefix)
    for row in trace:
        row["iteration"] += offset
    return model, spec, trace_prefix + trace


def posterior_fit_rows(model, spec, data: LoadedData, grid_points=200, n_samples=1000, seed=0):
    """Rows for the posterior-fit CSV: transition posterior on a grid and smoothed state pairs."""
    from .posteriors import draw_noise, simulate

    rows = []
    chols = model.Kzz_chols()
    Y = data.train.observations
    lo, hi = float(Y.min()), float(Y.max())
    pad = 0.1 * (hi - lo + 1e-12)
    grid = np.linspace(lo - pad, hi + pad, grid_points)
    for d in range(model.latent_dim):
        X = np.zeros((grid_points, model.input_dim))
        X[:, d] = grid
        mean, var = model.gp(d).marginal(jnp.asarray(X), chols[d])
        mean, sd = np.asarray(mean), np.sqrt(np.maximum(np.asarray(var), 0.0))
        for g, m, s in zip(grid, mean, sd):
            rows.append(("transition", d, g, m, m - 3 * s, m + 3 * s))
    c = None if data.train.controls is None else jnp.asarray(data.train.controls)[: spec.T - 1]
    noise = draw_noise(jax.random.PRNGKey(seed), n_samples, spec.T, model.latent_dim, model.num_inducing)
    X = np.asarray(jax.jit(simulate)(spec, model, c, noise)["states"])
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    for t in range(spec.T):
        for d in range(model.latent_dim):
            rows.append(("state", d, float(t + 1), mean[t, d], mean[t, d] - 3 * sd[t, d], mean[t, d] + 3 * sd[t, d]))
    for t in range(spec.T - 1):
        for d in range(model.latent_dim):
            rows.append(("pair", d, mean[t, d], mean[t + 1, d], np.nan, np.nan))
    return rows, X


POSTERIOR_FIT_COLUMNS = ("kind", "dim", "x", "y", "lower", "upper")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


@dataclass
class ExperimentArtifacts:
    directory: Path
    checkpoint: Path
    trace: Path
    metrics: Path | None
    posterior_fit: Path
    figures: list
    metrics_row: dict | None
    model: GpssmModel
    spec: object


def experiment_dir(config: ExperimentConfig, results_root) -> Path:
    return Path(results_root) / f"{config.name}-{config.config_hash()}"


def run_experiment(config: ExperimentConfig, results_root, stages=("fit", "evaluate")) -> ExperimentArtifacts:
    """Fit, checkpoint and evaluate one configuration, writing every artifact under one directory.

    The directory is ``<results_root>/<name>-<config hash>``. On failure an
    ``error.json`` report lists the artifacts written so far, marked partial.
    """
    from .evaluation import METRICS_COLUMNS, evaluate_predictions, predict, write_metrics
    from .inference import write_trace
    from .posteriors import load_checkpoint, save_checkpoint

    config.validate()
    out = experiment_dir(config, results_root)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    written = []
    paths = dict(
        checkpoint=out / "checkpoint.npz",
        trace=out / "trace.csv",
        metrics=out / "metrics.csv",
        posterior_fit=out / "posterior_fit.csv",
    )
    try:
        t0 = time.perf_counter()
        data = load_experiment_data(config)
        figures = []
        if "fit" in stages:
            model, spec, trace = fit_model(config, data)
            save_checkpoint(paths["checkpoint"], model, spec, extra={"config_hash": config.config_hash()})
            written.append(paths["checkpoint"])
            write_trace(paths["trace"], trace, include_wall_time=config.output.record_wall_time)
            written.append(paths["trace"])
            rows, samples = posterior_fit_rows(
                model, spec, data, config.output.grid_points, config.output.posterior_samples, config.prediction.seed
            )
            _write_rows(paths["posterior_fit"], POSTERIOR_FIT_COLUMNS, rows)
            written.append(paths["posterior_fit"])
            if config.output.figures:
                from . import plotting

                figures += plotting.experiment_figures(out, rows, trace, samples, data)
                written += figures
        else:
            model, spec, _ = load_checkpoint(paths["checkpoint"])
        metrics_row = None
        if "evaluate" in stages and data.test.T > 0:
            H = min(config.prediction.horizon, data.test.T)
            future = None
            if model.control_dim:
                future = data.test.controls[: H - 1]
            P = predict(model, spec, data.train, H, config.prediction.n_samples, future, config.prediction.seed)
            Y_test = data.test.observations[:H]
            metrics = evaluate_predictions(P, Y_test, np.asarray(model.emission.R))
            wall = time.perf_counter() - t0 if config.output.record_wall_time else float("nan")
            metrics_row = dict(
                dataset=data.train.name,
                variant=spec.variant.value,
                nlpp=metrics.nlpp,
                rmse=metrics.rmse,
                horizon=H,
                n_samples=metrics.n_samples_used,
                seed=config.train.rng_seed,
                wall_seconds=float(wall),
            )
            assert tuple(metrics_row) == METRICS_COLUMNS
            write_metrics(paths["metrics"], [metrics_row])
            written.append(paths["metrics"])
            if config.output.figures:
                from . import plotting

                figures.append(plotting.prediction_figure(out / "prediction.png", P, data, H))
                written.append(figures[-1])
    except Exception as exc:
        report = {
            "error": type(exc).__name__,
            "message": str(exc),
            "partial": True,
            "artifacts": [str(p) for p in written],
            "traceback": traceback.format_exc(),
        }
        (out / "error.json").write_text(json.dumps(report, indent=2))
        raise
    return ExperimentArtifacts(
        directory=out,
        checkpoint=paths["checkpoint"],
        trace=paths["trace"],
        metrics=paths["metrics"] if metrics_row is not None else None,
        posterior_fit=paths["posterior_fit"],
        figures=figures,
        metrics_row=metrics_row,
        model=model,
        spec=spec,
    )
