"""Report figures, rendered to files next to the machine-readable outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

ARM_COLORS = {"transfer": "#1f77b4", "scratch": "#d62728"}


def _figure(width=4.0, ratio=0.75):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * ratio))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)


def plot_rms_histogram(report: dict, path) -> None:
    """Bar chart of generated motion scores over the label bins."""
    edges = np.asarray(report["rms_histogram"]["edges"])
    counts = np.asarray(report["rms_histogram"]["counts"])
    fig, ax = _figure()
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="0.4", edgecolor="white", linewidth=0.3)
    ax.set_xlabel("RMS motion score (mm)")
    ax.set_ylabel("volumes")
    ax.set_title(f"{report['n_outputs']} generated volumes")
    _save(fig, path)


def plot_calibration(points, path, r2: float | None = None) -> None:
    """Mean predicted score per true-score bin, against the identity line."""
    pts = np.asarray([(c, m) for c, m, _ in points])
    fig, ax = _figure(ratio=1.0)
    lo = float(min(pts.min(), 0.0))
    hi = float(pts.max())
    ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8, ls="--")
    ax.plot(pts[:, 0], pts[:, 1], "o-", ms=3, lw=1)
    ax.set_xlabel("true score")
    ax.set_ylabel("mean predicted score")
    if r2 is not None:
        ax.set_title(f"R$^2$ = {r2:.2f}")
    _save(fig, path)


def plot_comparison(report: dict, path) -> None:
    """Per-seed test balanced accuracy of both arms, medians marked."""
    fig, ax = _figure()
    for i, arm in enumerate(("transfer", "scratch")):
        runs = [r for r in report["runs"] if r["arm"] == arm]
        ys = [r["balanced_accuracy"] for r in runs]
        xs = i + np.linspace(-0.12, 0.12, len(ys)) if len(ys) > 1 else [i]
        ax.scatter(xs, ys, s=14, color=ARM_COLORS[arm], label=arm)
        ax.hlines(report["median"][arm]["balanced_accuracy"], i - 0.25, i + 0.25, color=ARM_COLORS[arm])
    ax.axhline(1 / 3, color="0.7", lw=0.8, ls=":")
    ax.set_xticks([0, 1], ["transfer", "scratch"])
    ax.set_ylabel("test balanced accuracy")
    ax.set_ylim(0, 1)
    _save(fig, path)


def plot_history(history, path, metric_label: str = "val R$^2$") -> None:
    epochs = [h["epoch"] for h in history]
    fig, ax = _figure()
    ax.plot(epochs, [h["train_loss"] for h in history], lw=1, label="train loss")
    ax.plot(epochs, [h["val_loss"] for h in history], lw=1, label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["val_metric"] for h in history], lw=1, color="0.3", ls="--")
    ax2.set_ylabel(metric_label)
    ax.legend(loc="upper right", frameon=False)
    _save(fig, path)


def plot_scaling(report: dict, path) -> None:
    """Measured speedup per worker count against ideal linear scaling."""
    ws = [r["workers"] for r in report["runs"]]
    fig, ax = _figure()
    ax.plot(ws, ws, color="0.6", lw=0.8, ls="--", label="linear")
    ax.plot(ws, [r["speedup"] for r in report["runs"]], "o-", ms=3, lw=1, label="measured")
    ax.set_xlabel("workers")
    ax.set_ylabel("speedup")
    ax.set_title(f"{report['n_volumes']} volumes, {report['cpu_count']} CPU(s)")
    ax.legend(frameon=False)
    _save(fig, path)
