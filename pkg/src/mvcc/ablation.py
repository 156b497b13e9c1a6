"""Six-arm comparison: contrastive variants without pretraining, masking variants with it.

=============  ===================  =======================
arm            pretraining mask     fine-tuning objective
=============  ===================  =======================
baseline       none                 CE (lambda = 0)
+scl           none                 CE + lambda * SupCon
+cscl          none                 CE + lambda * l_con
mvcc-patch     alpha = 0            CE + lambda * l_con
mvcc-frame     beta = 0             CE + lambda * l_con
mvcc           alpha, beta          CE + lambda * l_con
=============  ===================  =======================

Arms run one after another with the same seeds, so data order, masks
and weight init line up across arms.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig, TrainConfig, config_digest, to_dict
from .data import Manifest
from .evaluation import METRICS, MetricsReport, format_cell
from .plotting import emit_plots
from .training import RunRecord, run_seed

ARMS = ("baseline", "+scl", "+cscl", "mvcc-patch", "mvcc-frame", "mvcc")


def arm_configs(exp: ExperimentConfig, arm: str) -> tuple[TrainConfig | None, TrainConfig]:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    pre = copy.deepcopy(exp.pretrain)
    ft = copy.deepcopy(exp.finetune)
    ft.init_checkpoint = ""
    if arm == "baseline":
        ft.contrastive_arm, ft.lambda_ = "none", 0.0
        return None, ft
    if arm in ("+scl", "+cscl"):
        ft.contrastive_arm = arm[1:]
        return None, ft
    ft.contrastive_arm = "cscl"
    pre.masking_arm = {"mvcc-patch": "patch", "mvcc-frame": "frame", "mvcc": "dual"}[arm]
    return pre, ft


@dataclass
class AblationResult:
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    configs: dict[str, dict] = field(default_factory=dict)
    records: dict[str, list[RunRecord]] = field(default_factory=dict)

    def table(self) -> dict[str, dict[str, dict]]:
        return {arm: rep.aggregate for arm, rep in self.reports.items()}

    def text(self) -> str:
        width = max(len(a) for a in self.reports) + 2
        lines = ["Method".ljust(width) + "".join(f"{m + '(%)':>15}" for m in METRICS)]
        for arm, rep in self.reports.items():
            cells = "".join(f"{format_cell(rep.aggregate[m]['mean'], rep.aggregate[m]['std']):>15}" for m in METRICS)
            lines.append(arm.ljust(width) + cells)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            arm: {
                "config": self.configs[arm],
                "report": rep.to_dict(),
                "mask_stats": sorted({tuple(s) for r in self.records[arm] if r.stage == "pretrain" for s in r.mask_stats}),
            }
            for arm, rep in self.reports.items()
        }

    def write(self, out_dir: str | os.PathLike) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "ablation.txt").write_text(self.text() + "\n", encoding="utf-8")
        with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
            for arm, rep in self.reports.items():
                row = [arm]
                for m in METRICS:
                    agg = rep.aggregate[m]
                    row += ["" if agg["mean"] is None else f"{agg['mean']:.4f}", "" if agg["std"] is None else f"{agg['std']:.4f}"]
                w.writerow(row)
        paths = [out / "ablation.json", out / "ablation.txt", out / "ablation.csv"]
        recs = [r for arm in self.records for r in self.records[arm]]
        paths += emit_plots(recs, out / "figures", ablation=self.table())
        return paths


def run_ablation(
    exp: ExperimentConfig,
    seeds: list[int],
    manifest: Manifest,
    out_dir: str | os.PathLike | None = None,
    arms: tuple[str, ...] = ARMS,
    split: str = "test",
) -> AblationResult:
    result = AblationResult()
    for arm in arms:
        pre, ft = arm_configs(exp, arm)
        per_seed, cms, recs = [], [], []
        for seed in seeds:
            sub = Path(out_dir) / "runs" / arm / f"seed_{seed}" if out_dir is not None else None
            metrics, cm, r = run_seed(exp, manifest, seed, pre, ft, sub, split)
            per_seed.append(metrics)
            cms.append(cm)
            recs.extend(r)
        arm_cfg = {"pretrain": to_dict(pre) if pre else None, "finetune": to_dict(ft)}
        result.reports[arm] = MetricsReport.from_runs(per_seed, cms, config_digest(exp))
        result.configs[arm] = arm_cfg
        result.records[arm] = recs
    if out_dir is not None:
        result.write(out_dir)
    return result
