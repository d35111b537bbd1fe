"""Matplotlib figures for run reports (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_pretrain(report, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(report.train_loss) + 1)
    ax.plot(steps, report.train_loss, lw=0.6, alpha=0.6, label="train")
    if report.heldout_loss:
        s, h = zip(*report.heldout_loss)
        ax.plot(s, h, "o-", label="held-out")
    ax.set_xlabel("step")
    ax.set_ylabel("next-token loss")
    ax.legend()
    _save(fig, path)


def plot_runlogs(logs: dict, path):
    """One column per quantity (loss, mean induction count, A), one line per run."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.3))
    for name, log in logs.items():
        steps = log.column("step")
        axes[0].plot(steps, log.column("mean_loss"), label=name)
        axes[1].plot(steps, log.column("mean_induction_count"), label=name)
        axes[2].plot(steps, log.column("A"), label=name)
    for ax, title in zip(axes, ("training loss", "mean induction heads", "punish factor A")):
        ax.set_title(title)
        ax.set_xlabel("step")
    axes[0].legend(fontsize=7)
    _save(fig, path)


def plot_profiles(profiles: dict, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.3), sharey=True)
    for name, prof in profiles.items():
        layers = np.arange(len(prof.S))
        axes[0].plot(layers, prof.S, "o-", label=name)
        axes[1].plot(layers, prof.S_plus, "o-", label=name)
    axes[0].set_title("mass on all label positions")
    axes[1].set_title("mass on correct label positions")
    for ax in axes:
        ax.set_xlabel("layer")
    axes[0].legend(fontsize=7)
    _save(fig, path)


def plot_grid(grid, path):
    fig, ax = plt.subplots(figsize=(5, 4.2))
    cs = ax.contourf(grid.alpha_A, grid.alpha_E, grid.accuracy, levels=12, cmap="viridis")
    fig.colorbar(cs, ax=ax, label="accuracy")
    ax.plot([0, 1, 0], [0, 0, 1], "wo")
    for (aE, aA), name in zip(((0, 0), (1, 0), (0, 1)), ("pre", "E2E", "ABFT")):
        ax.annotate(name, (aA, aE), color="w", xytext=(4, 4), textcoords="offset points")
    ax.plot([0, 1], [1, 0], "w--", lw=0.8)
    ax.set_xlabel("alpha_A")
    ax.set_ylabel("alpha_E")
    _save(fig, path)


def plot_shift(shift, path, kinds=("W_Q", "W_K", "W_V", "W_O", "mlp.W_in", "mlp.W_out")):
    M = shift.matrix(kinds)
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(M) + 1.5))
    im = ax.imshow(M, cmap="magma", aspect="auto")
    fig.colorbar(im, ax=ax, label="Frobenius distance")
    ax.set_xticks(range(len(kinds)), kinds, rotation=30)
    ax.set_yticks(range(len(M)))
    ax.set_ylabel("layer")
    _save(fig, path)


def plot_accuracy(rows, path):
    """Bar chart from (checkpoint, task, accuracy) rows."""
    names = sorted({r[0] for r in rows})
    tasks = sorted({r[1] for r in rows})
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(tasks), 3.3))
    for i, name in enumerate(names):
        vals = [next((r[2] for r in rows if r[0] == name and r[1] == t), np.nan) for t in tasks]
        ax.bar(np.arange(len(tasks)) + i * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(tasks)) + 0.4 - width / 2, tasks)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    _save(fig, path)
