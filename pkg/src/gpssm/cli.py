"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 1 anything else.
Outputs go under ``$GPSSM_RESULTS_DIR`` (default ``./results``) unless
``--results-dir`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, NumericalError

RESULTS_ENV = "GPSSM_RESULTS_DIR"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def results_root(arg=None) -> Path:
    return Path(arg or os.environ.get(RESULTS_ENV) or "results")


def _config_from_args(args):
    from .data import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.override(
        posterior__variant=args.variant,
        posterior__chunk_length=args.chunk_length,
        model__latent_dim=args.latent_dim,
        model__n_inducing=args.n_inducing,
        train__max_iterations=args.max_iterations,
        train__n_mc_samples=args.n_mc_samples,
        train__rng_seed=args.seed,
        prediction__horizon=args.horizon,
        prediction__n_samples=args.n_pred_samples,
    )


def _add_config_flags(p):
    p.add_argument("--config", help="YAML experiment configuration")
    p.add_argument("--results-dir", help=f"results root (default ${RESULTS_ENV} or ./results)")
    p.add_argument("--variant", help="posterior variant")
    p.add_argument("--chunk-length", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--n-inducing", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--n-mc-samples", type=int)
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--horizon", type=int)
    p.add_argument("--n-pred-samples", type=int)


def cmd_generate_kink(args):
    from .data import generate_kink_dataset

    ds, x = generate_kink_dataset(args.T, args.process_sd, args.obs_sd, args.seed)
    out = Path(args.out) if args.out else results_root(args.results_dir) / f"kink_T{args.T}_seed{args.seed}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y", "x_true"])
        for t in range(ds.T):
            w.writerow([t + 1, repr(float(ds.observations[t, 0])), repr(float(x[t, 0]))])
    print(out)


def cmd_fit(args):
    from .data import run_experiment

    cfg = _config_from_args(args)
    art = run_experiment(cfg, results_root(args.results_dir), stages=("fit",))
    print(art.directory)


def cmd_run(args):
    from .data import run_experiment

    cfg = _config_from_args(args)
    art = run_experiment(cfg, results_root(args.results_dir), stages=("fit", "evaluate"))
    print(json.dumps({"directory": str(art.directory), **(art.metrics_row or {})}))


def cmd_evaluate(args):
    from .data import run_experiment

    cfg = _config_from_args(args)
    art = run_experiment(cfg, results_root(args.results_dir), stages=("evaluate",))
    print(json.dumps({"directory": str(art.directory), **(art.metrics_row or {})}))


def cmd_predict(args):
    import numpy as np

    from .data import experiment_dir, load_experiment_data
    from .evaluation import predict
    from .posteriors import load_checkpoint

    cfg = _config_from_args(args)
    out = experiment_dir(cfg, results_root(args.results_dir))
    ckpt = out / "checkpoint.npz"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run `gpssm fit` with the same configuration first")
    model, spec, _ = load_checkpoint(ckpt)
    data = load_experiment_data(cfg)
    H = cfg.prediction.horizon
    future = None
    if model.control_dim:
        if data.test.T < H - 1:
            raise ConfigError("test split too short to supply future controls")
        future = data.test.controls[: H - 1]
    P = predict(model, spec, data.train, H, cfg.prediction.n_samples, future, cfg.prediction.seed)
    path = out / "predictions.csv"
    lo, hi = np.percentile(P, [0.5, 99.5], axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "dim", "mean", "sd", "q005", "q995"])
        for h in range(H):
            for e in range(P.shape[2]):
                col = P[:, h, e]
                w.writerow([h + 1, e] + [repr(float(v)) for v in (col.mean(), col.std(ddof=1), lo[h, e], hi[h, e])])
    print(path)


def cmd_bias_study(args):
    from .evaluation import bias_study, reference_bias_model
    from .plotting import bias_figure

    model = reference_bias_model(args.sigma_u)
    rep = bias_study(model, args.n_samples, args.T, args.seed, args.alpha)
    out = results_root(args.results_dir) / "bias_study"
    out.mkdir(parents=True, exist_ok=True)
    tag = f"sigma{args.sigma_u:g}_T{args.T}_seed{args.seed}"
    path = out / f"bias_{tag}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ks_statistic", "p_value", "rejected"])
        for t, (k, p) in enumerate(zip(rep.ks_statistics, rep.p_values), start=1):
            w.writerow([t, repr(float(k)), repr(float(p)), int(p < args.alpha)])
    bias_figure(out / f"bias_{tag}.png", rep)
    print(f"{path}: {rep.verdict}")


def cmd_timing_study(args):
    from .evaluation import timing_study
    from .plotting import timing_figure

    res = timing_study(tuple(args.lengths), args.repeats)
    out = results_root(args.results_dir) / "timing_study"
    out.mkdir(parents=True, exist_ok=True)
    path = out / "timing.csv"
    keys = [k for k in ("prior_seconds", "prior_incremental_seconds", "vcdt_seconds") if k in res]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T"] + keys)
        for i, T in enumerate(res["T"]):
            w.writerow([T] + [repr(res[k][i]) for k in keys])
    timing_figure(out / "timing.png", res)
    print(json.dumps({k: v for k, v in res.items() if k.endswith("ratio")}))


def build_parser():
    p = argparse.ArgumentParser(prog="gpssm", description="GP state-space model fitting and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-kink", help="simulate the kink system to CSV")
    g.add_argument("--T", type=int, default=120)
    g.add_argument("--process-sd", type=float, default=0.05)
    g.add_argument("--obs-sd", type=float, default=0.8**0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--results-dir")
    g.set_defaults(func=cmd_generate_kink)

    for name, func, help_ in (
        ("fit", cmd_fit, "train and write checkpoint, trace, posterior fit and figures"),
        ("evaluate", cmd_evaluate, "score the saved checkpoint on the test split"),
        ("predict", cmd_predict, "write predictive summaries from the saved checkpoint"),
        ("run", cmd_run, "fit then evaluate"),
    ):
        s = sub.add_parser(name, help=help_)
        _add_config_flags(s)
        s.set_defaults(func=func)

    b = sub.add_parser("bias-study", help="compare coherent and per-step inducing draws")
    b.add_argument("--sigma-u", type=float, default=1.0, help="q(u) covariance as a multiple of K_ZZ")
    b.add_argument("--n-samples", type=int, default=10_000)
    b.add_argument("--T", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--alpha", type=float, default=0.01)
    b.add_argument("--results-dir")
    b.set_defaults(func=cmd_bias_study)

    t = sub.add_parser("timing-study", help="sampling time against sequence length")
    t.add_argument("--lengths", type=int, nargs="+", default=[100, 400])
    t.add_argument("--repeats", type=int, default=5)
    t.add_argument("--results-dir")
    t.set_defaults(func=cmd_timing_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
