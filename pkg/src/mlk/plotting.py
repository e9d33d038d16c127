"""Figures written next to benchmark reports and loss curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so equal inputs give byte-identical PNGs
_PNG_METADATA = {"Software": None}
_STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def _series_label(row: dict) -> str:
    return f"{row['estimator']} / {row['retrieval']} / {row['method']}"


def plot_k_sweep(aggregates: Sequence[dict], path) -> Path:
    """Median translation and rotation error, and median wall time, against k."""
    series: dict[str, list[dict]] = {}
    for row in aggregates:
        series.setdefault(_series_label(row), []).append(row)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(13.0, 3.8))
        for label, rows in sorted(series.items()):
            rows = sorted(rows, key=lambda r: r["k"])
            ks = [r["k"] for r in rows]
            axes[0].plot(ks, [r["median_trans_units"] for r in rows], marker="o", label=label)
            axes[1].plot(ks, [r["median_rot_deg"] for r in rows], marker="o", label=label)
            axes[2].plot(ks, [r["median_wall_time_ms"] for r in rows], marker="o", label=label)
        axes[0].set_ylabel("median translation error (scene units)")
        axes[1].set_ylabel("median rotation error (deg)")
        axes[2].set_ylabel("median wall time per query (ms)")
        for ax in axes:
            ax.set_xlabel("references k")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_recall(records, path, max_deg: float = 30.0) -> Path:
    """Cumulative recall of the combined angular error, one curve per grid cell."""
    groups: dict[str, list[float]] = {}
    for r in records:
        label = f"{r.estimator} / k={r.k} / {r.retrieval} / {r.method}"
        groups.setdefault(label, []).append(max(r.rot_err_deg, r.trans_err_deg))
    xs = np.linspace(0.0, max_deg, 301)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for label, errs in sorted(groups.items()):
            e = np.sort(np.asarray(errs))
            ax.step(xs, np.searchsorted(e, xs, side="right") / e.size, where="post", label=label)
        ax.set_xlabel("max(rotation, translation-direction) error (deg)")
        ax.set_ylabel("recall")
        ax.set_ylim(0, 1.02)
        if len(groups) <= 12:
            ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, Path(path))


def render_report_figures(report, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    paths = {"recall_png": plot_recall(report.records, outdir / "recall.png")}
    if len({row["k"] for row in report.aggregates}) > 1:
        paths["k_sweep_png"] = plot_k_sweep(report.aggregates, outdir / "k_sweep.png")
    return paths


def plot_loss_curve(curve: Sequence[dict], path, window: int = 50) -> Path:
    """Total loss (raw and smoothed) and gradient norm per step."""
    steps = np.array([r["step"] for r in curve])
    total = np.array([r["total"] for r in curve])
    grad = np.array([r["grad_norm"] for r in curve])
    with plt.rc_context(_STYLE):
        fig, (ax0, ax1) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 5.0))
        ax0.plot(steps, total, lw=0.5, alpha=0.4, color="C0")
        if len(total) >= window:
            sm = np.convolve(total, np.ones(window) / window, mode="valid")
            ax0.plot(steps[window - 1 :], sm, color="C0")
        ax0.set_ylabel("total loss")
        ax1.plot(steps, grad, lw=0.6, color="C3")
        ax1.set_ylabel("gradient norm")
        ax1.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, Path(path))
