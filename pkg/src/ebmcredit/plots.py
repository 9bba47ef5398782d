"""PNG renderings of experiment tables, written next to the CSV files."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _columns(table):
    columns, rows = table
    return {c: [r[i] for r in rows] for i, c in enumerate(columns)}


def _fig2a(ax, t):
    seed0 = t["seed"][0]
    idx = [i for i, s in enumerate(t["seed"]) if s == seed0]
    for key in ("internal", "supervised", "total"):
        ax.plot([t["step"][i] for i in idx], [t[key][i] for i in idx], label=key)
    ax.set_xlabel("inference step")
    ax.set_ylabel("energy")
    ax.legend()


def _fig2b(ax, t):
    step = np.array(t["step"])
    mean = np.array(t["mean_distance"])
    std = np.array(t["std_distance"])
    ax.plot(step, mean)
    ax.fill_between(step, mean - std, mean + std, alpha=0.3)
    ax.set_xlabel("inference step")
    ax.set_ylabel("distance to backprop direction")


def _fig2c(ax, t):
    ids = t["init_id"]
    for init in sorted(set(ids)):
        idx = [i for i, v in enumerate(ids) if v == init]
        ax.plot([t["equilibrium_distance"][i] for i in idx], [t["gradient_distance"][i] for i in idx], marker=".")
    ax.set_xlabel("equilibrium distance")
    ax.set_ylabel("gradient distance")


def _fig3a(ax, t):
    ax.errorbar(t["lambda"], t["mean_distance"], yerr=t["std_distance"], marker="o")
    ax.set_xlabel("lambda")
    ax.set_ylabel("distance to backprop gradient")


def _curves(ax, t):
    rules = t["rule"]
    for rule in dict.fromkeys(rules):
        idx = [i for i, r in enumerate(rules) if r == rule]
        ax.plot([t["batch"][i] for i in idx], [t["accuracy"][i] for i in idx], label=rule)
    ax.set_xlabel("batch")
    ax.set_ylabel("batch accuracy")
    ax.legend()


def _fig3c(ax, t):
    ax.plot(t["batch"], t["cosine"])
    ax.set_xlabel("batch")
    ax.set_ylabel("cosine similarity")


PLOTTERS = {
    "fig2a": _fig2a,
    "fig2b": _fig2b,
    "fig2c": _fig2c,
    "fig3a": _fig3a,
    "fig3b": _curves,
    "fig3c": _fig3c,
    "train": _curves,
}


def render(result, out_dir):
    """Draw every table that has a plotter; returns the PNG paths."""
    paths = []
    for name, table in result.tables.items():
        plotter = PLOTTERS.get(name)
        if plotter is None:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        plotter(ax, _columns(table))
        ax.set_title(name)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{name}.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
