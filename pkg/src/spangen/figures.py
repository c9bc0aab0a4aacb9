"""Matplotlib figures rendered next to the delimited report outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(rows: Sequence[dict], path: str | Path) -> None:
    """Per-epoch loss/objective curves from the training metrics log."""
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    panels = [
        ("sleep_bce", "Sleep BCE"),
        ("wake_elbo", "Wake objective"),
        ("kl", "Weighted span KL"),
        ("mean_reward", "Mean reward"),
    ]
    for ax, (key, title) in zip(axes.flat, panels):
        ys = [r.get(key) for r in rows]
        if all(y is None for y in ys):
            ax.text(0.5, 0.5, "disabled", ha="center", va="center", transform=ax.transAxes)
        else:
            ax.plot(epochs, [float("nan") if y is None else y for y in ys], marker="o")
        ax.set_title(title)
        ax.grid(True, linestyle=":")
    if any("val_metrics" in r for r in rows):
        axes.flat[1].plot(
            epochs, [r["val_metrics"]["elbo"] for r in rows], marker="s", linestyle="--",
            label="validation ELBO",
        )
        axes.flat[1].legend()
    for ax in axes[-1]:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_bars(report: dict, path: str | Path) -> None:
    """Bar chart of the numeric entries of a metrics report."""
    items = [(k, v) for k, v in report.items() if isinstance(v, (int, float))]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(items)), 4))
    if items:
        keys, values = zip(*items)
        ax.bar(range(len(items)), values, color="tab:blue")
        ax.set_xticks(range(len(items)))
        ax.set_xticklabels(keys, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("value")
    ax.set_title("evaluation metrics")
    ax.grid(True, axis="y", linestyle=":")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_one2many_bars(ratios: dict, path: str | Path) -> None:
    keys = ["unique_grounding_ratio", "unique_generation_ratio", "effect_of_grounding"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(range(len(keys)), [ratios[k] for k in keys], color=["tab:blue", "tab:orange", "tab:green"])
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(["unique\ngrounding", "unique\ngeneration", "effect of\ngrounding"])
    ax.set_ylim(0, max(1.05, max(ratios[k] for k in keys) * 1.1))
    ax.grid(True, axis="y", linestyle=":")
    ax.set_title("one-to-many ratios")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
