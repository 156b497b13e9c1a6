"""Confusion-matrix metrics and mean(std) reporting.

The positive class is label 1 (malignant-like). Ratios with a zero
denominator are reported as ``None`` rather than 0 so they drop out of
multi-seed averages instead of dragging them down.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import Manifest, ManifestEntry
from .errors import DataError, DomainError

METRICS = ("ACC", "SEN", "SPE", "PRE", "F1")


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, labels, preds) -> ConfusionMatrix:
        y = np.asarray(labels).astype(int)
        p = np.asarray(preds).astype(int)
        if y.shape != p.shape:
            raise DataError("labels and predictions differ in length")
        if not np.isin(y, (0, 1)).all():
            raise DataError(f"unknown labels {sorted(set(y.tolist()) - {0, 1})}")
        return cls(
            tp=int(((y == 1) & (p == 1)).sum()),
            fp=int(((y == 0) & (p == 1)).sum()),
            tn=int(((y == 0) & (p == 0)).sum()),
            fn=int(((y == 1) & (p == 0)).sum()),
        )

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _ratio(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def compute_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    """ACC, SEN, SPE, PRE and F1 in percent; ``None`` where undefined."""
    if min(cm.tp, cm.fp, cm.tn, cm.fn) < 0:
        raise DomainError("confusion-matrix counts must be non-negative")
    if cm.total < 1:
        raise DomainError("confusion matrix is empty")
    sen = _ratio(cm.tp, cm.tp + cm.fn)
    pre = _ratio(cm.tp, cm.tp + cm.fp)
    if sen is None or pre is None or sen + pre == 0:
        f1 = None
    else:
        f1 = 2 * pre * sen / (pre + sen)
    return {
        "ACC": _ratio(cm.tp + cm.tn, cm.total),
        "SEN": sen,
        "SPE": _ratio(cm.tn, cm.tn + cm.fp),
        "PRE": pre,
        "F1": f1,
    }


def aggregate(per_seed: list[dict[str, float | None]]) -> dict[str, dict[str, float | None]]:
    """Mean and population std of each metric over the seeds where it is defined."""
    if not per_seed:
        raise DomainError("no per-seed metrics to aggregate")
    out = {}
    for m in METRICS:
        vals = [r[m] for r in per_seed if r.get(m) is not None]
        if vals:
            out[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            out[m] = {"mean": None, "std": None, "n": 0}
    return out


def format_cell(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.2f}({std:.2f})"


def format_row(agg: dict[str, dict[str, float | None]]) -> str:
    """Single text row ``ACC SEN SPE PRE F1`` as ``xx.xx(y.yy)`` cells."""
    return " ".join(format_cell(agg[m]["mean"], agg[m]["std"]) for m in METRICS)


@dataclass
class MetricsReport:
    per_seed: list[dict[str, float | None]]
    aggregate: dict[str, dict[str, float | None]] = field(default_factory=dict)
    config_digest: str = ""
    confusion: list[dict[str, int]] = field(default_factory=list)

    @classmethod
    def from_runs(cls, per_seed, confusion=None, config_digest: str = "") -> MetricsReport:
        confusion = [asdict(c) if isinstance(c, ConfusionMatrix) else c for c in (confusion or [])]
        return cls(list(per_seed), aggregate(per_seed), config_digest, confusion)

    def row(self) -> str:
        return format_row(self.aggregate)

    def to_dict(self) -> dict:
        return {
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "config_digest": self.config_digest,
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@torch.no_grad()
def predict(model, pixels: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class and logits for a ``(N, T, H, W, C)`` pixel array."""
    model.eval()
    dtype = next(model.parameters()).dtype
    logits = []
    for i in range(0, len(pixels), batch_size):
        x = torch.from_numpy(pixels[i : i + batch_size]).to(dtype)
        logits.append(model(x)[0])
    out = torch.cat(logits).double().numpy() if logits else np.zeros((0, 2))
    return out.argmax(axis=1), out


def evaluate_entries(model, manifest: Manifest, entries: list[ManifestEntry]) -> ConfusionMatrix:
    if not entries:
        raise DomainError("evaluation split is empty")
    labels = [e.label for e in entries]
    if any(lab not in (0, 1) for lab in labels):
        raise DataError(f"unknown labels in manifest: {sorted({l for l in labels if l not in (0, 1)})}")
    preds, _ = predict(model, manifest.load_pixels(entries))
    return ConfusionMatrix.from_predictions(labels, preds)


def evaluate(model, manifest: Manifest, split: str = "test") -> tuple[ConfusionMatrix, MetricsReport]:
    """Score ``model`` on one manifest split (argmax decisions)."""
    cm = evaluate_entries(model, manifest, manifest.split(split))
    report = MetricsReport.from_runs([compute_metrics(cm)], [cm])
    return cm, report


def f1_consistent(metrics: dict[str, float | None], tol: float = 1e-9) -> bool:
    pre, sen, f1 = metrics["PRE"], metrics["SEN"], metrics["F1"]
    if pre is None or sen is None or pre + sen == 0:
        return f1 is None
    return math.isclose(f1, 2 * pre * sen / (pre + sen), abs_tol=tol)
