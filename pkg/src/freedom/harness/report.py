"""Figures for a finished run, rendered from its metrics CSV and summary.

matplotlib is an optional dependency (``pip install artifact[report]``); it is
imported only when a report is requested.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .datafiles import DataError, load_labels
from .metrics import read_metrics, read_summary

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
COLORS = ["#08589e", "#e6550d", "#31a354", "#756bb1", "#636363", "#de2d26"]

RC = {
    "font.family": "serif",
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


class ReportError(RuntimeError):
    pass


def size(width: float = 6.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width, width * ratio


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise ReportError("the report needs matplotlib: pip install 'artifact[report]'") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update(RC)
    plt.rcParams["axes.prop_cycle"] = matplotlib.cycler(color=COLORS)
    return plt


def _series(rows, phase: str, name: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(r.epoch, r.metrics[name]) for r in rows if r.phase == phase and name in r.metrics]
    if not pts:
        return np.zeros(0), np.zeros(0)
    e, v = zip(*pts)
    return np.asarray(e), np.asarray(v)


def plot_source_losses(plt, rows, path: Path) -> Path:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=size(6.5, 0.4))
    for name in ("recon", "class_helper"):
        e, v = _series(rows, "pretrain", name)
        ax0.plot(e, v, marker="o", label=name)
    ax0.set(title="pretraining", xlabel="epoch", ylabel="loss")
    ax0.legend(frameon=False)
    for name in ("recon", "class_kl", "style_kl", "class_helper", "style_helper"):
        e, v = _series(rows, "source", name)
        ax1.plot(e, v, label=name)
    ax1.set(title="source training", xlabel="epoch")
    ax1.legend(frameon=False, ncol=2)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_adaptation(plt, rows, summary: dict, path: Path) -> Path:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=size(6.5, 0.4))
    # adaptation epochs are numbered across warm-up and main phases
    for phase, marker in (("warmup", "s"), ("adapt", "o")):
        e, v = _series(rows, phase, "ratio")
        ax0.plot(e, v, marker=marker, label=phase)
    ax0.set(title="confident-batch ratio", xlabel="adaptation epoch", ylim=(0, 1.02))
    ax0.legend(frameon=False)
    keys = ("baseline_target_acc", "adapted_target_acc", "source_test_acc")
    vals = [summary.get(k) or 0.0 for k in keys]
    ax1.bar(["source-only", "adapted", "source test"], vals, color=COLORS[:3])
    chance = summary.get("chance")
    if chance:
        ax1.axhline(chance, color="k", lw=0.8, ls="--", label="chance")
        ax1.legend(frameon=False, loc="lower right")
    ax1.set(title="accuracy", ylim=(0, 1.02))
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        table = np.array([[float(v) for v in row] for row in reader])
    return header, table.reshape(-1, len(header))


def plot_embeddings(plt, emb_path, labels, path: Path) -> Path:
    header, table = read_embeddings(emb_path)
    groups = sorted({h.rsplit("_", 1)[0] for h in header})
    fig, axes = plt.subplots(1, len(groups), figsize=size(3.2 * len(groups), 0.9), squeeze=False)
    for ax, g in zip(axes[0], groups):
        cols = [i for i, h in enumerate(header) if h.rsplit("_", 1)[0] == g][:2]
        xy = table[:, cols] if len(cols) == 2 else np.c_[table[:, cols[0]], np.zeros(len(table))]
        c = None if labels is None else np.asarray(labels)
        ax.scatter(xy[:, 0], xy[:, 1], c=c, s=4, cmap="tab10", alpha=0.7, linewidths=0)
        ax.set(title=f"{g} embedding means", xlabel=f"{g}_0", ylabel=f"{g}_1")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_report(run_dir: str | Path, out_dir: str | Path | None = None,
                  embeddings: str | Path | None = None, labels=None) -> list[Path]:
    """Writes PNG figures for the run in ``run_dir``; returns their paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "figures"
    metrics, summary = run_dir / "metrics.csv", run_dir / "summary.json"
    for p in (metrics, summary):
        if not p.exists():
            raise DataError(f"run artifact missing: {p}")
    rows = read_metrics(metrics)
    plt = _pyplot()
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_source_losses(plt, rows, out / "source_losses.png"),
             plot_adaptation(plt, rows, read_summary(summary), out / "adaptation.png")]
    if embeddings is not None:
        if labels is not None and not isinstance(labels, np.ndarray):
            labels = load_labels(labels)
        paths.append(plot_embeddings(plt, embeddings, labels, out / "embeddings.png"))
    return paths
