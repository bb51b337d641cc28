"""Figures written alongside the metrics and ablation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("l_sup", "l_self", "l_anti", "l_adv", "l_total")


def plot_training_curves(records: list[dict], path) -> Path:
    """Per-epoch losses on the left, confident fraction and F1 scores on the right."""
    path = Path(path)
    epochs = [r["epoch"] for r in records]
    fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(10, 4))
    for key in LOSS_KEYS:
        ax_l.plot(epochs, [r[key] for r in records], label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend(fontsize=8)

    ax_r.plot(epochs, [r["confident_fraction"] for r in records], label="confident fraction", color="k")
    for key in ("target_macro_f1", "source_macro_f1"):
        pts = [(e, r[key]) for e, r in zip(epochs, records) if r.get(key) is not None]
        if pts:
            ax_r.plot(*zip(*pts), label=key.replace("_", " "))
    ax_r.set_ylim(0, 1.05)
    ax_r.set_xlabel("epoch")
    ax_r.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ablation(table: list[dict], path) -> Path:
    path = Path(path)
    ids = [row["id"] for row in table]
    f1 = [row["macro_f1"] for row in table]
    acc = [row["accuracy"] for row in table]
    xs = range(len(ids))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([x - 0.2 for x in xs], f1, width=0.4, label="macro-F1")
    ax.bar([x + 0.2 for x in xs], acc, width=0.4, label="accuracy")
    ax.set_xticks(list(xs), ids)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("target score (mean over seeds)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
