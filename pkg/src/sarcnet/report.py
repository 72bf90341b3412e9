"""Evaluation report emission: per-cell CSV, text summary, histogram figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DataIOError, ManifestError, NumericError
from .training import EvalReport, HIST_EDGES, _safe_metrics, day_histogram

DAY_COLORS = ("tab:blue", "tab:red", "tab:green", "tab:orange", "tab:purple")


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "ground_truth", "prediction", "day"])
        for cell_id, gt, pred, day in report.rows:
            writer.writerow([cell_id, repr(float(gt)), f"{pred:.6f}", day])


def load_eval_csv(path) -> list[tuple]:
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            required = {"cell_id", "ground_truth", "prediction", "day"}
            if not required.issubset(reader.fieldnames or []):
                raise ManifestError(
                    f"{path} is not an evaluation CSV (columns {reader.fieldnames})"
                )
            for r in reader:
                rows.append((r["cell_id"], float(r["ground_truth"]),
                             float(r["prediction"]), int(r["day"])))
    except OSError as exc:
        raise DataIOError(f"cannot read evaluation CSV {path}: {exc}") from exc
    if not rows:
        raise ManifestError(f"evaluation CSV {path} has no rows")
    return rows


def _check_self_consistency(report: EvalReport) -> None:
    """The emitted metrics must be recomputable from the emitted table."""
    preds, targets = report.predictions(), report.targets()
    fresh = _safe_metrics(preds, targets)
    for key in ("spearman", "mae", "mse", "r2"):
        a, b = report.metrics.get(key), fresh.get(key)
        if (a is None) != (b is None):
            raise NumericError(f"report metric {key} inconsistent with table")
        if a is not None and abs(a - b) > 1e-9:
            raise NumericError(
                f"report metric {key}={a} differs from table recomputation {b}"
            )
    for day, counts in report.histograms.items():
        sel = np.asarray([d == day for d in report.days()])
        if not np.array_equal(counts, day_histogram(preds[sel])):
            raise NumericError(f"day {day} histogram inconsistent with table")


def summary_text(report: EvalReport) -> str:
    lines = ["evaluation summary", f"cells: {len(report.rows)}"]
    if report.epoch is not None:
        lines.append(f"checkpoint_epoch: {report.epoch}")
    for key in ("spearman", "mae", "mse", "r2"):
        value = report.metrics.get(key)
        lines.append(f"{key}: " + ("nan" if value is None else f"{value:.6f}"))
    if report.metrics.get("degenerate"):
        lines.append(f"degenerate_metrics: {report.metrics['degenerate']}")
    day_means = {}
    preds = report.predictions()
    days = np.asarray(report.days())
    for day in sorted(report.histograms):
        sel = days == day
        day_means[day] = float(preds[sel].mean())
        counts = ",".join(str(int(c)) for c in report.histograms[day])
        lines.append(f"day{day}_cells: {int(sel.sum())}")
        lines.append(f"day{day}_mean_prediction: {day_means[day]:.6f}")
        lines.append(f"day{day}_histogram: {counts}")
    if len(day_means) > 1:
        top = max(sorted(day_means), key=lambda d: day_means[d])
        lines.append(f"higher_mean_day: {top}")
    return "\n".join(lines) + "\n"


def save_day_histogram_png(day: int, counts: np.ndarray, path,
                           color: str = "tab:blue") -> None:
    centers = (HIST_EDGES[:-1] + HIST_EDGES[1:]) / 2.0
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers, counts, width=0.45, color=color, edgecolor="black",
           linewidth=0.5)
    ax.set_xlabel("predicted organization score")
    ax.set_ylabel("cells")
    ax.set_title(f"day {day}")
    ax.set_xticks(np.arange(1, 6))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report_files(report: EvalReport, out_dir) -> dict[str, Path]:
    """Emit eval.csv, summary.txt, and one histogram PNG per day."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _check_self_consistency(report)
    paths = {"csv": out / "eval.csv", "summary": out / "summary.txt"}
    write_eval_csv(report, paths["csv"])
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        fh.write(summary_text(report))
    for i, (day, counts) in enumerate(sorted(report.histograms.items())):
        png = out / f"hist_day{day}.png"
        save_day_histogram_png(day, counts, png,
                               DAY_COLORS[i % len(DAY_COLORS)])
        paths[f"hist_day{day}"] = png
    return paths


def report_from_rows(rows: list[tuple]) -> EvalReport:
    """Rebuild an EvalReport (metrics + histograms) from per-cell rows."""
    preds = np.asarray([r[2] for r in rows], dtype=np.float64)
    targets = np.asarray([r[1] for r in rows], dtype=np.float64)
    metrics = _safe_metrics(preds, targets)
    histograms = {}
    for day in sorted({r[3] for r in rows}):
        sel = np.asarray([r[3] == day for r in rows])
        histograms[day] = day_histogram(preds[sel])
    return EvalReport(list(rows), metrics, histograms)
