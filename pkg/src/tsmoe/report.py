"""Matplotlib figure rendering for run artifacts.

Figures are companions to the delimited outputs: the CSV/JSON files carry
the contract, the PNGs make them readable at a glance. Everything renders
through the Agg backend so headless runs work.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_STYLE = {
    "figure.figsize": (8.0, 4.5),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
}


def apply_style():
    matplotlib.rcParams.update(_STYLE)


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_loss_curves(rows: list[dict], path):
    """Task loss and both balance losses over training steps."""
    apply_style()
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, [r["task_loss"] for r in rows], label="task loss")
    ax1.plot(steps, [r["total"] for r in rows], label="total", alpha=0.7)
    ax1.set_xlabel("step")
    ax1.set_yscale("log")
    ax1.legend()
    ax1.set_title("training loss")
    ax2.plot(steps, [r["l_tem"] for r in rows], label="temporal balance")
    ax2.plot(steps, [r["l_cha"] for r in rows], label="channel balance")
    ax2.set_xlabel("step")
    ax2.legend()
    ax2.set_title("balance losses (unweighted)")
    _finish(fig, path)


def render_forecast(payload: dict, path):
    apply_style()
    inp = payload["input"]
    target = payload["target"]
    pred = payload["prediction"]
    names = payload["channel_names"]
    n_ch = min(len(names), 4)
    fig, axes = plt.subplots(n_ch, 1, figsize=(9, 2.2 * n_ch), squeeze=False)
    t_in = np.arange(inp.shape[1])
    t_out = np.arange(inp.shape[1], inp.shape[1] + target.shape[1])
    for c in range(n_ch):
        ax = axes[c, 0]
        ax.plot(t_in, inp[c], color="gray", lw=0.9, label="lookback")
        ax.plot(t_out, target[c], color="tab:blue", lw=1.0, label="actual")
        ax.plot(t_out, pred[c], color="tab:red", lw=1.0, ls="--", label="forecast")
        ax.set_ylabel(names[c])
        if c == 0:
            ax.legend(ncol=3)
    _finish(fig, path)


def render_imputation(payload: dict, path):
    apply_style()
    values = payload["values"]
    observed = payload["observed"]
    recon = payload["reconstruction"]
    names = payload["channel_names"]
    n_ch = min(len(names), 4)
    fig, axes = plt.subplots(n_ch, 1, figsize=(9, 2.2 * n_ch), squeeze=False)
    t = np.arange(values.shape[1])
    for c in range(n_ch):
        ax = axes[c, 0]
        ax.plot(t, values[c], color="tab:blue", lw=0.9, label="actual")
        ax.plot(t, recon[c], color="tab:red", lw=0.9, ls="--", label="reconstruction")
        hidden = ~observed[c]
        ax.scatter(t[hidden], values[c][hidden], s=12, facecolors="none",
                   edgecolors="black", label="masked")
        ax.set_ylabel(names[c])
        if c == 0:
            ax.legend(ncol=3)
    _finish(fig, path)


def render_anomaly(payload: dict, path):
    apply_style()
    scores = payload["scores"]
    labels = payload["labels"]
    threshold = payload["threshold"]
    fig, ax = plt.subplots()
    t = np.arange(scores.size)
    ax.plot(t, scores, lw=0.8, label="reconstruction score")
    ax.axhline(threshold, color="tab:red", ls="--", lw=1.0, label="threshold")
    hits = labels.astype(bool)
    ax.scatter(t[hits], scores[hits], s=14, color="tab:orange", zorder=3,
               label="labeled anomaly")
    ax.set_xlabel("test timestep")
    ax.set_yscale("log")
    ax.legend()
    _finish(fig, path)


def render_confusion(confusion: np.ndarray, path):
    apply_style()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(confusion, cmap="Blues")
    n = confusion.shape[0]
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=9)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    fig.colorbar(im, shrink=0.8)
    _finish(fig, path)


def render_routing_heatmap(rows: list[tuple], n_layers: int, n_channels: int,
                           n_patches: int, n_routed: int, path):
    """Per-layer heatmaps of gate weight by (token, expert)."""
    apply_style()
    grids = np.zeros((n_layers, n_channels * n_patches, n_routed))
    for layer, channel, patch, expert, weight in rows:
        grids[layer - 1, channel * n_patches + patch, expert] = weight
    fig, axes = plt.subplots(1, n_layers, figsize=(3.2 * n_layers, 3.6), squeeze=False)
    for l in range(n_layers):
        ax = axes[0, l]
        im = ax.imshow(grids[l], aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(f"layer {l + 1}")
        ax.set_xlabel("expert")
        if l == 0:
            ax.set_ylabel("token (channel-major)")
        ax.grid(False)
    fig.colorbar(im, ax=axes[0, -1], shrink=0.8)
    _finish(fig, path)


def render_cka(pairs: dict, path):
    apply_style()
    keys = [k for k, v in pairs.items() if isinstance(v, float)]
    vals = [pairs[k] for k in keys]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * max(len(keys), 1), 3.6))
    ax.bar(range(len(keys)), vals, color="tab:blue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("linear CKA")
    _finish(fig, path)
