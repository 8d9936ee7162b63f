"""Report figures. Everything renders off-screen to PNG files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# fixed metadata keeps PNG bytes stable across reruns
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def loss_curves(curve: list[dict], path, best_iteration: int | None = None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        it = [r["iteration"] for r in curve]
        ax.plot(it, [r["train_loss"] for r in curve], label="train")
        ax.plot(it, [r["val_loss"] for r in curve], label="validation")
        if best_iteration:
            ax.axvline(best_iteration, color="k", lw=0.8, ls="--", label="best")
        ax.set_xlabel("iteration")
        ax.set_ylabel("NLL per target")
        ax.legend()
        _save(fig, path)


def error_bars(table: dict[str, dict[str, tuple[float, float]]], path, ylabel="error (m)") -> None:
    """Grouped bars: ``table[row][column] = (mean, std)``."""
    rows = list(table)
    cols = list(dict.fromkeys(c for r in rows for c in table[r]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        width = 0.8 / max(len(cols), 1)
        x = np.arange(len(rows))
        for j, c in enumerate(cols):
            vals = [table[r].get(c, (np.nan, 0.0)) for r in rows]
            ax.bar(x + j * width, [v[0] for v in vals], width, yerr=[v[1] for v in vals], label=c, capsize=2)
        ax.set_xticks(x + width * (len(cols) - 1) / 2, rows)
        ax.set_ylabel(ylabel)
        ax.legend()
        _save(fig, path)


def plan_paths(start, goal, predicted, actual, path, title: str = "") -> None:
    """Top-down view of predicted vs executed object positions."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        pred = np.asarray([start, *predicted])
        act = np.asarray([start, *actual])
        ax.plot(pred[:, 0], pred[:, 1], "o--", label="predicted")
        ax.plot(act[:, 0], act[:, 1], "s-", label="executed")
        ax.plot(*goal, "r*", ms=12, label="goal")
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        _save(fig, path)


def nstep_errors(results: list[dict], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar([r["n"] for r in results], [r["mean"] for r in results],
                    yerr=[r["std"] for r in results], marker="o", capsize=3)
        ax.set_xlabel("steps ahead")
        ax.set_ylabel("effect error (m)")
        _save(fig, path)
