"""Static figures for run records and ablation tables (Agg backend, PNG)."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}
# no timestamps or version strings in the PNG, so identical inputs give identical bytes
_PNG_METADATA = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_loss_curve(record, path: str | os.PathLike, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = np.arange(len(record.step_losses))
        ax.plot(steps, record.step_losses, lw=0.8, alpha=0.5, label="step")
        if record.epoch_losses:
            per_epoch = len(record.step_losses) / len(record.epoch_losses)
            ex = (np.arange(len(record.epoch_losses)) + 1) * per_epoch - 1
            ax.plot(ex, record.epoch_losses, marker="o", ms=3, lw=1.2, label="epoch mean")
        ax.set_xlabel("step")
        ax.set_ylabel("masked MSE" if record.stage == "pretrain" else "total loss")
        ax.set_title(title or f"{record.stage} loss")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_metric_bars(table: dict[str, dict[str, dict]], path: str | os.PathLike, title: str = "") -> Path:
    """Grouped bars: one group per metric, one bar per method, std as error bars.

    ``table`` maps method -> metric -> {"mean", "std"}.
    """
    methods = list(table)
    metrics = list(next(iter(table.values())))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(metrics))
    with plt.rc_context({**STYLE, "figure.figsize": (8.0, 3.8)}):
        fig, ax = plt.subplots()
        for i, m in enumerate(methods):
            means = [table[m][k]["mean"] if table[m][k]["mean"] is not None else np.nan for k in metrics]
            stds = [table[m][k]["std"] if table[m][k]["std"] is not None else 0.0 for k in metrics]
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels(metrics)
        ax.set_ylabel("%")
        ax.set_ylim(0, 105)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, ncol=min(len(methods), 6), fontsize=7, loc="lower center", bbox_to_anchor=(0.5, 1.0))
        return _save(fig, Path(path))


def emit_plots(records, out_dir: str | os.PathLike, ablation: dict | None = None) -> list[Path]:
    """Write one loss curve per record plus, if given, the ablation bar chart."""
    records = list(records or [])
    if not records and not ablation:
        log.warning("emit_plots: nothing to plot")
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, rec in enumerate(records):
        if rec.step_losses:
            paths.append(plot_loss_curve(rec, out / f"loss_{i:02d}_{rec.stage}.png"))
    if ablation:
        paths.append(plot_metric_bars(ablation, out / "ablation_metrics.png", "test metrics, mean (std) over seeds"))
    return paths
