"""Report figures rendered to PNG with the Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "tokprobe",
}

TASK_COLORS = {
    "sentlen": "#1b9e77",
    "bshift": "#d95f02",
    "tense": "#7570b3",
    "objnum": "#e7298a",
    "coordinv": "#66a61e",
    "subjnum": "#e6ab02",
}


def _save(fig, path, stamp):
    # no Software/date chunks, so identical inputs give identical bytes
    fig.savefig(path, format="png", metadata={"Software": None, "Description": stamp})
    plt.close(fig)


def layer_curves(path, series: dict, title, ylabel, stamp, ylim=None, markers=True):
    """One line per named series; ``series`` maps name -> (layers, values)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for name, (layers, values) in series.items():
            ax.plot(layers, values, marker="o" if markers else None, ms=3, lw=1.2,
                    color=TASK_COLORS.get(name), label=name)
        ax.set_xlabel("layer")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if ylim:
            ax.set_ylim(*ylim)
        all_layers = sorted({l for layers, _ in series.values() for l in layers})
        if all_layers:
            ax.set_xticks(all_layers)
        ax.legend(frameon=False, loc="best")
        fig.tight_layout()
        _save(fig, path, stamp)


def delta_bars(path, layers, deltas: dict, stamp):
    """Grouped bars of mean-minus-[CLS] accuracy per layer and task."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        names = list(deltas)
        width = 0.8 / max(len(names), 1)
        x = np.arange(len(layers))
        for k, name in enumerate(names):
            ax.bar(x + k * width - 0.4 + width / 2, deltas[name], width, color=TASK_COLORS.get(name), label=name)
        ax.axhline(0, color="0.3", lw=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels([str(l) for l in layers])
        ax.set_xlabel("layer")
        ax.set_ylabel("mean - [CLS] accuracy")
        ax.legend(frameon=False, ncol=min(len(names), 3))
        fig.tight_layout()
        _save(fig, path, stamp)


def top_token_bars(path, table: dict, title, stamp):
    """Small multiples: top tokens per layer with their mean normalized saliency."""
    layers = sorted(table)
    if not layers:
        return
    cols = min(len(layers), 4)
    rows = int(np.ceil(len(layers) / cols))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 1.9 * rows), squeeze=False)
        for ax in axes.ravel():
            ax.set_visible(False)
        for ax, layer in zip(axes.ravel(), layers):
            ax.set_visible(True)
            entries = table[layer]
            names = [e[0] for e in entries]
            vals = [e[1] for e in entries]
            ax.barh(range(len(names))[::-1], vals, color="#4c72b0")
            ax.set_yticks(range(len(names))[::-1])
            ax.set_yticklabels(names)
            ax.set_title(f"layer {layer}")
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path, stamp)
