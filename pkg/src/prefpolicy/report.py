"""Comma-separated report tables (figures come from :mod:`prefpolicy.plotting`)."""

from __future__ import annotations

import csv
from pathlib import Path

from prefpolicy.evaluation import best_window_stats


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def write_ablation_csv(report, path) -> Path:
    """Header rows (teacher accuracy, equal-label share) then one row per ablation value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "axis", "value", "mean", "std", "per_seed", "status"])
        w.writerow(["accuracy", report.axis, "", _fmt(report.accuracy), "", "", ""])
        w.writerow(["equal_fraction", report.axis, "", _fmt(report.equal_fraction), "", "", ""])
        for c in report.cells:
            per_seed = ";".join(f"{v:.4f}" for v in c.per_seed)
            w.writerow(["cell", report.axis, c.value, _fmt(c.metric), _fmt(c.std), per_seed, c.status])
    return path


def write_compare_csv(records: dict, path, window: int = 8) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "env", "metric", "std", "n_seeds", "n_checkpoints", "eval_episodes"])
        for name, rec in records.items():
            metric, std, _ = best_window_stats(rec.success, window)
            w.writerow([name, rec.env, _fmt(metric), _fmt(std), rec.success.shape[0], rec.success.shape[1], rec.episodes])
    return path
