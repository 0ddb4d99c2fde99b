"""Static PNG figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def transition_figure(path, rows, true_fn=None, dim=0):
    """Posterior transition mean with a 3-sd band, plus smoothed (x_t, x_{t+1}) pairs."""
    grid = np.array([r[2:] for r in rows if r[0] == "transition" and r[1] == dim], dtype=float)
    pairs = np.array([r[2:4] for r in rows if r[0] == "pair" and r[1] == dim], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    if len(grid):
        ax.fill_between(grid[:, 0], grid[:, 2], grid[:, 3], color="C0", alpha=0.25, label="3 sd")
        ax.plot(grid[:, 0], grid[:, 1], color="C0", label="posterior mean")
        if true_fn is not None:
            ax.plot(grid[:, 0], true_fn(grid[:, 0]), "k--", lw=1, label="true")
    if len(pairs):
        ax.plot(pairs[:, 0], pairs[:, 1], ".", color="C1", ms=4, label="smoothed pairs")
    ax.set_xlabel("$x_t$")
    ax.set_ylabel("$x_{t+1}$")
    ax.legend(fontsize=8)
    return _save(fig, path)


def states_figure(path, samples, observations=None, true_states=None, dim=0):
    X = np.asarray(samples)[..., dim]
    t = np.arange(1, X.shape[1] + 1)
    mean, sd = X.mean(0), X.std(0)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.fill_between(t, mean - 3 * sd, mean + 3 * sd, color="C0", alpha=0.25)
    ax.plot(t, mean, color="C0", label="posterior mean")
    if observations is not None and observations.shape[1] > dim:
        ax.plot(t, observations[: len(t), dim], ".", color="0.5", ms=3, label="observations")
    if true_states is not None:
        ax.plot(t, true_states[: len(t), dim], "k--", lw=1, label="true state")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    return _save(fig, path)


def trace_figure(path, trace):
    it = np.array([r["iteration"] for r in trace])
    elbo = np.array([r["elbo"] for r in trace])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(it, elbo, lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("ELBO estimate")
    return _save(fig, path)


def prediction_figure(path, samples, data, horizon, dim=0):
    P = np.asarray(samples)[..., dim]
    T = data.train.T
    t_future = np.arange(T + 1, T + horizon + 1)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(np.arange(1, T + 1), data.train.observations[:, dim], ".", color="0.5", ms=3, label="training")
    ax.plot(t_future, data.test.observations[:horizon, dim], "k.", ms=4, label="test")
    lo, hi = np.percentile(P, [0.5, 99.5], axis=0)
    ax.fill_between(t_future, lo, hi, color="C2", alpha=0.25, label="99% band")
    ax.plot(t_future, P.mean(0), color="C2", label="predictive mean")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    return _save(fig, path)


def experiment_figures(out_dir, rows, trace, samples, data):
    from .data import kink_function

    out_dir = Path(out_dir)
    true_fn = kink_function if data.true_states is not None else None
    return [
        transition_figure(out_dir / "transition.png", rows, true_fn),
        states_figure(out_dir / "states.png", samples, data.train.observations, data.true_states),
        trace_figure(out_dir / "trace.png", trace),
    ]


def bias_figure(path, report):
    t = np.arange(1, len(report.ks_statistics) + 1)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(t, report.ks_statistics, "o-", label="KS statistic")
    ax2 = ax.twinx()
    ax2.semilogy(t, np.maximum(report.p_values, 1e-300), "s--", color="C3", label="p-value")
    ax2.axhline(report.alpha, color="C3", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("KS statistic")
    ax2.set_ylabel("p-value")
    return _save(fig, path)


def timing_figure(path, result):
    fig, ax = plt.subplots(figsize=(5, 3))
    for key, label in (("prior_seconds", "exact prior"), ("prior_incremental_seconds", "exact prior (eager)"), ("vcdt_seconds", "VCDT")):
        if key in result:
            ax.loglog(result["T"], result[key], "o-", label=label)
    ax.set_xlabel("T")
    ax.set_ylabel("seconds")
    ax.legend(fontsize=8)
    return _save(fig, path)
