"""Report figures written next to the metric CSVs (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, ax, path, title, xlabel, ylabel):
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_dagger(rows, path):
    """Loss per iteration with success rate on a twin axis."""
    it = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(it, [r["train_loss"] for r in rows], "o-", label="train loss")
    if any(r.get("eval_loss") is not None for r in rows):
        ax.plot(it, [r.get("eval_loss", np.nan) for r in rows], "s--", label="on-policy loss")
    ax.set_yscale("log")
    ax.legend(loc="upper left", fontsize=8)
    evald = [(r["iteration"], r["success_rate"]) for r in rows if r.get("success_rate") is not None]
    if evald:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evald), "d-", color="tab:green")
        ax2.set_ylim(-0.02, 1.02)
        ax2.set_ylabel("grid success rate")
    return _finish(fig, ax, path, "DAGGER training", "iteration", "imitation loss")


def plot_vision(histories: dict, path):
    """Precision and recall trajectories, one line per training condition."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    for name, rows in histories.items():
        ep = [r["epoch"] for r in rows]
        axes[0].plot(ep, [r["recall"] for r in rows], "o-", label=name)
        axes[1].plot(ep, [r["precision"] for r in rows], "o-", label=name)
    axes[0].set_ylabel("recall")
    axes[1].set_ylabel("precision")
    axes[1].legend(fontsize=8)
    for ax in axes:
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_e2e(results: dict, path):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, rows in results.items():
        ax.plot([r["iteration"] for r in rows], [r["train_loss"] for r in rows], "o-", label=name)
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _finish(fig, ax, path, "End-to-end training", "iteration", "action loss")


def plot_grid(result, path):
    """Per-cell success fraction over the workspace grid."""
    pos = result.positions
    frac = result.outcomes.mean(axis=1)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    sc = ax.scatter(pos[:, 1], pos[:, 0], c=frac, vmin=0, vmax=1, s=160, cmap="RdYlGn", edgecolors="k")
    fig.colorbar(sc, ax=ax, label="success fraction")
    ax.set_aspect("equal")
    return _finish(fig, ax, path, f"grid success {result.success_rate:.2f}", "y (m)", "x (m)")


def plot_replay(gap, path):
    labels = ["closed nominal", "closed perturbed", "open nominal", "open perturbed"]
    vals = [gap.closed_nominal, gap.closed_perturbed, gap.open_nominal, gap.open_perturbed]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.bar(labels, vals, color=["tab:blue", "tab:blue", "tab:orange", "tab:orange"])
    ax.set_ylim(0, 1.05)
    ax.tick_params(axis="x", labelsize=8)
    return _finish(fig, ax, path, "Closed loop vs open-loop replay", "", "success rate")
