"""PNG figures rendered next to the CSV/JSON outputs of a run."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_trace(trace, path, title="search trace"):
    it = [r[0] for r in trace]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, col, label in zip(axes, (1, 2, 3), ("objective", "accuracy", "L = max|dW|")):
        ax.plot(it, [r[col] for r in trace])
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
    fig.suptitle(title)
    _save(fig, path)


def plot_c_sweep(rows, th_g, path):
    c = [r["c"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx(c, [r["L"] for r in rows], "o-", label="final L")
    ax.axhline(th_g, color="k", ls="--", lw=0.8, label="th_g")
    ax.set_xlabel("c")
    ax.set_ylabel("max |dW|")
    ax2 = ax.twinx()
    ax2.semilogx(c, [r["accuracy"] for r in rows], "s:", color="tab:red", label="accuracy")
    ax2.set_ylabel("accuracy")
    ax.legend(loc="upper left")
    _save(fig, path)


def plot_confidence(analysis, path):
    edges = np.asarray(analysis.bin_edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    w = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(centers - w / 4, analysis.hist_correct, width=w / 2, label="correct")
    ax.bar(centers + w / 4, analysis.hist_wrong, width=w / 2, label="wrong")
    ax.set_xlabel("softmax confidence")
    ax.set_ylabel("samples")
    ax.legend()
    _save(fig, path)


def plot_perturbation(analysis, path):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 3.5))
    n = len(analysis.histogram)
    a1.bar((np.arange(n) + 0.5) / n, analysis.histogram, width=1.0 / n)
    a1.set_xlabel("|dW| / th_g")
    a1.set_ylabel("weights")
    names = [l["name"].replace(".weight", "") for l in analysis.per_layer]
    a2.bar(names, [100 * l["perturbed_fraction"] for l in analysis.per_layer])
    a2.set_ylabel("% weights perturbed")
    a2.tick_params(axis="x", rotation=45)
    _save(fig, path)


def plot_sweep(result, path):
    t = [r[0] for r in result.curve]
    m = [100 * r[1] for r in result.curve]
    s = [0.0 if np.isnan(r[2]) else 100 * r[2] for r in result.curve]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.errorbar(t, m, yerr=s, fmt="-", capsize=3)
    ax.plot([0.0], [100 * result.clean_mean], "o", ms=9, mfc="none", label="th_g = 0")
    if result.star is not None:
        ms = dict(zip(t, m))[result.star]
        ax.plot([result.star], [ms], "*", ms=14, label=f"star th_g = {result.star:g}")
    ax.set_xlabel("th_g")
    ax.set_ylabel("worst-case accuracy (%)")
    ax.legend()
    _save(fig, path)


def plot_training(history, path):
    e = [r[0] for r in history.rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(e, [r[1] for r in history.rows], "o-", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(e, [r[2] for r in history.rows], "s--", color="tab:green", label="val acc")
    ax2.set_ylabel("validation accuracy")
    _save(fig, path)


def plot_mc(accuracies, path):
    acc = np.asarray(accuracies)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 3.5))
    a1.hist(acc, bins=30)
    a1.set_xlabel("accuracy")
    a1.set_ylabel("runs")
    a2.plot(np.arange(1, len(acc) + 1), np.minimum.accumulate(acc))
    a2.set_xscale("log")
    a2.set_xlabel("runs")
    a2.set_ylabel("running minimum accuracy")
    _save(fig, path)
