"""Figures written next to run outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

CURVES = ("ism_residual_norm", "pos", "lap", "emotion", "total")


def loss_series(records: list[dict]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-term (iterations, values) pairs; terms absent from a record are skipped there."""
    out = {}
    for name in CURVES:
        pts = [(r["iter"], r["losses"][name]) for r in records if name in r.get("losses", {})]
        if pts:
            it, val = zip(*pts)
            out[name] = (np.asarray(it), np.asarray(val, dtype=np.float64))
    return out


def plot_losses(records: list[dict], path) -> Path:
    """Loss curves on a log axis, one panel per term."""
    series = loss_series(records)
    path = Path(path)
    fig, axes = plt.subplots(len(series) or 1, 1, figsize=(6, 1.8 * max(len(series), 1)), sharex=True,
                             squeeze=False)
    for ax, (name, (it, val)) in zip(axes[:, 0], series.items()):
        ax.plot(it, val, lw=0.8)
        if (val > 0).all():
            ax.set_yscale("log")
        ax.set_ylabel(name, fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("iteration")
    fig.tight_layout()
    # fixed metadata keeps the file reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
