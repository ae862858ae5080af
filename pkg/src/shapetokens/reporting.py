"""Figure and table rendering for evaluation reports and sweeps.

Every report lands as three artifacts in one directory: line-delimited
per-run records (``report.jsonl``), the aggregated report with its summary
block (``report.json``), and PNG figures. Sweeps get an image strip plus a
per-metric curve when metrics are available.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from shapetokens.evaluation import MetricsReport

__all__ = [
    "write_report_records",
    "summary_table",
    "render_report_figures",
    "render_sweep_figure",
    "render_training_curve",
    "write_report_bundle",
]

_COLUMNS = (
    ("s_iou", "S-IOU", "{:.4f}"),
    ("s_cd", "S-CD", "{:.4f}"),
    ("clip", "CLIP", "{:.2f}"),
    ("fid", "FID", "{:.2f}"),
    ("kid", "KID", "{:.3f}"),
    ("aes", "Aes.", "{:.2f}"),
)


def write_report_records(report: MetricsReport, path: str | Path) -> Path:
    """Per-run records, one JSON object per line, summary object last."""
    path = Path(path)
    lines = [json.dumps(row, sort_keys=True) for row in report.rows]
    lines.append(json.dumps({"summary": report.summary, "metadata": report.metadata},
                            sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def summary_table(report: MetricsReport) -> str:
    """Fixed-width table of the summary metrics that are present."""
    present = [(key, label, fmt) for key, label, fmt in _COLUMNS if key in report.summary]
    if not present:
        return "(no summary metrics)"
    labels = [label for _, label, _ in present]
    values = [fmt.format(report.summary[key]) for key, _, fmt in present]
    widths = [max(len(a), len(b)) for a, b in zip(labels, values)]
    head = "  ".join(label.rjust(w) for label, w in zip(labels, widths))
    body = "  ".join(value.rjust(w) for value, w in zip(values, widths))
    return head + "\n" + body


def render_report_figures(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Summary bar chart plus per-run silhouette-metric chart, as PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    keys = [key for key, _, _ in _COLUMNS if key in report.summary]
    if keys:
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(keys), 3.2))
        ax.bar(range(len(keys)), [report.summary[k] for k in keys], color="#4878a8")
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels([label for key, label, _ in _COLUMNS if key in report.summary])
        ax.set_title("metric summary")
        fig.tight_layout()
        path = out_dir / "summary_metrics.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    per_run = [
        (i, row.get("s_iou"), row.get("s_cd"))
        for i, row in enumerate(report.rows)
        if row.get("s_iou") is not None or row.get("s_cd") is not None
    ]
    if per_run:
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        xs = [i for i, _, _ in per_run]
        ious = [v for _, v, _ in per_run]
        cds = [v for _, _, v in per_run]
        if any(v is not None for v in ious):
            ax.plot(xs, [np.nan if v is None else v for v in ious], "o-", label="S-IOU")
        if any(v is not None for v in cds):
            ax.plot(xs, [np.nan if v is None else v for v in cds], "s--", label="S-CD")
        ax.set_xlabel("run")
        ax.set_title("silhouette adherence per run")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "per_run_adherence.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def render_sweep_figure(
    lambdas: Sequence[float],
    images: Sequence[np.ndarray],
    path: str | Path,
) -> Path:
    """One row of images, captioned by guidance strength."""
    if len(lambdas) != len(images) or not images:
        raise ValueError("need one image per lambda, at least one")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(images), figsize=(2.1 * len(images), 2.5))
    if len(images) == 1:
        axes = [axes]
    for ax, lam, img in zip(axes, lambdas, images):
        ax.imshow(np.clip(np.asarray(img), 0.0, 1.0))
        ax.set_title(f"λ = {lam:g}", fontsize=10)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_training_curve(log_rows: Sequence[dict], path: str | Path, window: int = 25) -> Path:
    """Per-step loss with a trailing-mean overlay."""
    if not log_rows:
        raise ValueError("empty training log")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    losses = np.array([float(row["loss"]) for row in log_rows])
    steps = np.array([int(row["step"]) for row in log_rows])
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.plot(steps, losses, color="#b0b8c0", linewidth=0.8, label="loss")
    if len(losses) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[window - 1 :], smooth, color="#c04848", label=f"mean({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_report_bundle(report: MetricsReport, out_dir: str | Path) -> dict[str, object]:
    """Records, aggregated JSON, table text, and figures in one directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = write_report_records(report, out_dir / "report.jsonl")
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = summary_table(report)
    (out_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    figures = render_report_figures(report, out_dir)
    return {"records": records, "table": table, "figures": figures}
