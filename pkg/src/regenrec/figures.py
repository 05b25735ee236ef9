"""Report figures written next to the tab-delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}

# PNG text chunks only; no timestamps so repeated runs write identical files
_METADATA = {"Software": None}


def savefig(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=_METADATA)
    plt.close(fig)
    return path


def loss_curve(history, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epochs = [r["epoch"] for r in history]
        ax.plot(epochs, [r["train_loss"] for r in history], label="train")
        if history and "holdout_loss" in history[0]:
            ax.plot(epochs, [r["holdout_loss"] for r in history], label="held-out")
        ax.set_xlabel("epoch")
        ax.set_ylabel("reconstruction loss (nats/token)")
        ax.legend(frameon=False)
        return savefig(fig, path)


def length_histogram(original, regenerated, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        a = [len(s) for s in original]
        b = [len(s) for s in regenerated]
        bins = np.arange(1, max(a + b) + 2) - 0.5
        ax.hist(a, bins=bins, alpha=0.6, label=f"original (n={len(a)})")
        ax.hist(b, bins=bins, alpha=0.6, label=f"regenerated (n={len(b)})")
        ax.set_xlabel("sequence length")
        ax.set_ylabel("count")
        ax.legend(frameon=False)
        return savefig(fig, path)


def bilevel_log(records, path):
    keys = [("inner_loss", "inner loss"), ("dev_loss", "dev loss"), ("hypergrad_norm", "|hypergradient|"), ("mean_weight", "mean weight")]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(keys), figsize=(11, 2.6))
        steps = [r["outer_step"] for r in records]
        for ax, (key, label) in zip(axes, keys):
            ax.plot(steps, [r[key] for r in records], lw=1)
            ax.set_title(label)
            ax.set_xlabel("outer step")
        return savefig(fig, path)


def weight_map(weights, path, rows: int = 25):
    """Heat map of per-position sample weights for the first ``rows`` patterns."""
    rows = min(rows, len(weights))
    width = max((len(w) for w in weights[:rows]), default=1)
    grid = np.full((rows, width), np.nan)
    for i, w in enumerate(weights[:rows]):
        grid[i, : len(w)] = w
    with plt.rc_context(RC | {"axes.grid": False}):
        fig, ax = plt.subplots(figsize=(0.5 * width + 2, 0.18 * rows + 1))
        im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0, vmax=1)
        ax.set_xlabel("position t (from 2)")
        ax.set_ylabel("pattern")
        ax.set_xticks(range(width), [str(t + 2) for t in range(width)])
        fig.colorbar(im, ax=ax, label="weight")
        return savefig(fig, path)


def compare_bars(table, path, metric="test_ndcg@10"):
    """``table`` maps variant -> list of per-seed metric dicts."""
    names = list(table)
    means = [np.mean([r[metric] for r in table[n]]) for n in names]
    stds = [np.std([r[metric] for r in table[n]]) for n in names]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(names, means, yerr=stds, capsize=4, color=["0.6", "tab:blue", "tab:orange"][: len(names)])
        ax.set_ylabel(metric)
        return savefig(fig, path)
