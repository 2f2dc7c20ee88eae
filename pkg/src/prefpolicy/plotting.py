"""Matplotlib figures for comparison and ablation reports, written straight to files."""

from __future__ import annotations

from pathlib import Path

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
    "figure.figsize": (4.5, 3.0),
    "svg.hashsalt": "prefpolicy",
    "svg.fonttype": "none",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path


def plot_curves(records: dict, path, title: str = "") -> Path:
    """Seed-mean success rate per checkpoint, one line per run, shaded by +/- 1 std."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, rec in records.items():
            steps = np.asarray(rec.steps)
            mean, std = rec.success.mean(axis=0), rec.success.std(axis=0)
            ax.plot(steps, mean, label=name, lw=1.4)
            ax.fill_between(steps, mean - std, mean + std, alpha=0.2, lw=0)
        ax.set_xlabel("training step")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(report, path) -> Path:
    """Bar chart of the windowed metric per ablation value with seed-spread error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [str(c.value) for c in report.cells]
        means = [c.metric if c.status == "ok" else 0.0 for c in report.cells]
        stds = [c.std if c.status == "ok" else 0.0 for c in report.cells]
        x = np.arange(len(labels))
        bars = ax.bar(x, means, yerr=stds, capsize=3, color="#4c72b0", width=0.6)
        for bar, cell in zip(bars, report.cells):
            if cell.status != "ok":
                bar.set_hatch("//")
                bar.set_color("#bbbbbb")
        ax.set_xticks(x, labels)
        xlabel = {"dropout": "dropout probability", "equal_pref": "include equal preferences"}
        ax.set_xlabel(xlabel.get(report.axis, report.axis))
        ax.set_ylabel("windowed success rate")
        ax.set_ylim(0, 1.05)
        sub = f"equal labels {100 * report.equal_fraction:.1f}%"
        if report.accuracy is not None:
            sub += f", teacher accuracy {100 * report.accuracy:.1f}%"
        ax.set_title(f"{report.env}: {sub}")
        return _save(fig, path)
