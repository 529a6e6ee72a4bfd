"""Figures written next to the CSV/JSON outputs of each subcommand."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0

params = {
    "axes.labelsize": 10,
    "font.size": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def singular_values(normalized: np.ndarray, epsilon: float, path, title: str = "") -> Path:
    """Normalized singular values on a log scale with the threshold line."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        s = np.maximum(np.asarray(normalized, dtype=float), 1e-18)
        idx = np.arange(1, s.size + 1)
        ax.semilogy(idx, s, "o-")
        ax.axhline(epsilon, color="k", ls="--", lw=0.8, label=f"threshold {epsilon:g}")
        ax.set_xlabel("index")
        ax.set_ylabel(r"normalized $\sigma$")
        if title:
            ax.set_title(title, fontsize=9)
        ax.legend()
        return _save(fig, path)


def loss_curves(curves: Sequence[np.ndarray], path, labels: Sequence[str] | None = None, max_curves: int = 50) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for i, c in enumerate(curves[:max_curves]):
            ax.plot(np.arange(len(c)), c, lw=0.8, alpha=0.7, label=labels[i] if labels else None)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if labels:
            ax.legend()
        return _save(fig, path)


def parameter_trace(epochs: np.ndarray, values: np.ndarray, path, ylabel: str = "k") -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(epochs, values)
        ax.axhline(0, color="k", lw=0.6)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def landscape(k: np.ndarray, losses: dict[str, np.ndarray], path) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for label, y in losses.items():
            ax.plot(k, y, label=label)
        ax.set_xlabel("k")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def snapshots(x: np.ndarray, times: np.ndarray, fields: np.ndarray, path, n_lines: int = 6) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        picks = np.unique(np.linspace(0, len(times) - 1, n_lines).round().astype(int))
        cmap = plt.get_cmap("viridis")
        for j, i in enumerate(picks):
            ax.plot(x, fields[i], color=cmap(j / max(len(picks) - 1, 1)), label=f"t={times[i]:.3g}")
        ax.set_xlabel("x")
        ax.set_ylabel("u")
        ax.legend()
        return _save(fig, path)


def observables(times: np.ndarray, series: dict[str, np.ndarray], path, t_b: float | None = None, log: bool = False) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for label, y in series.items():
            ax.plot(times, y, label=label)
        if t_b is not None:
            ax.axvline(t_b, color="k", ls="--", lw=0.8, label="analytic break")
        if log:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.legend()
        return _save(fig, path)


def pca_scatter(projections: np.ndarray, labels: np.ndarray, path, sweeps: dict | None = None) -> Path:
    """First two principal components, coloured by cluster."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        P = np.asarray(projections)
        if P.shape[1] < 2:
            P = np.column_stack([P, np.zeros((P.shape[0], 2 - P.shape[1]))])
        sc = ax.scatter(P[:, 0], P[:, 1], c=labels, cmap="tab10", s=12)
        for name, pts in (sweeps or {}).items():
            xy = np.array([p["pc"][:2] + [0.0] * (2 - len(p["pc"][:2])) for p in pts])
            ax.plot(xy[:, 0], xy[:, 1], "k-", lw=0.6, alpha=0.6)
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
        fig.colorbar(sc, ax=ax, label="cluster")
        return _save(fig, path)
