"""Figures: similarity-network heatmaps and per-head macro F1 bars."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def similarity_heatmaps(networks: dict[str, np.ndarray], labels, path: str | Path) -> None:
    """One panel per network, samples ordered by class so block structure shows."""
    order = np.argsort(np.asarray(labels), kind="stable")
    fig, axes = plt.subplots(1, len(networks), figsize=(4 * len(networks), 4), squeeze=False)
    for ax, (name, m) in zip(axes[0], networks.items()):
        sub = np.asarray(m)[np.ix_(order, order)].copy()
        np.fill_diagonal(sub, np.nan)
        # clip at a high quantile so a few strong pairs do not wash out the rest
        ax.imshow(sub, cmap="viridis", vmax=np.nanquantile(sub, 0.99), interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def macro_f1_bars(rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.5))
    ax.bar([r["head"] for r in rows], [r["macro_f1"] for r in rows], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("test macro F1")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
