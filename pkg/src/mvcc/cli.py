"""``mvcc`` command line.

Exit codes: 0 success, 1 invalid input (config, data, checkpoint), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .ablation import ARMS, run_ablation
from .config import ExperimentConfig, load_config, schema_keys
from .data import Manifest, dataset_digest, generate_synthetic_dataset
from .errors import CheckpointError, ClipFormatError, ConfigError, DataError, DomainError
from .evaluation import MetricsReport, compute_metrics, evaluate_entries
from .gradcheck import SUITES, TOLERANCE
from .plotting import emit_plots
from .training import finetune, load_model, pretrain

log = logging.getLogger("mvcc")

VALIDATION_ERRORS = (ConfigError, DataError, DomainError, ClipFormatError, CheckpointError)


def _parse_seeds(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return list(default)
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def _manifest(cfg: ExperimentConfig, out: Path) -> Manifest:
    """The configured manifest, or a dataset generated under ``out/data`` from the ``data`` section."""
    if cfg.manifest:
        path = Path(cfg.manifest)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        return Manifest.load(path)
    path = out / "data" / "manifest.json"
    if path.is_file():
        return Manifest.load(path)
    print(f"generating {cfg.data.n_clips} clips into {path.parent}")
    return generate_synthetic_dataset(cfg.data.n_clips, cfg.data.params, cfg.data.seed, path.parent)


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    man = generate_synthetic_dataset(cfg.data.n_clips, cfg.data.params, cfg.data.seed, out)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    print(f"manifest: {out / 'manifest.json'}")
    print(f"clips: {len(man.entries)} splits: {counts} malignant: {sum(e.label for e in man.entries)}")
    print(f"digest: {dataset_digest(out / 'manifest.json')}")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    man = _manifest(cfg, out)
    rec, _ = pretrain(man, cfg.pretrain, cfg.model.encoder, cfg.model.decoder, out, cfg.augment)
    figs = emit_plots([rec], out / "figures")
    print(f"masked MSE: first step {rec.initial_loss:.5f} -> last epoch {rec.final_loss:.5f}")
    print(f"checkpoint: {rec.checkpoint} sha256 {rec.checkpoint_digest}")
    print(f"record: {out / 'pretrain_record.json'}")
    for f in figs:
        print(f"figure: {f}")
    return 0


def cmd_finetune(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    man = _manifest(cfg, out)
    rec, _ = finetune(man, cfg.finetune, cfg.model.encoder, cfg.finetune.init_checkpoint or None, out, cfg.augment)
    figs = emit_plots([rec], out / "figures")
    print(f"loss: last epoch {rec.final_loss:.5f}; val ACC per epoch: {', '.join(f'{a:.1f}' for a in rec.val_accuracy)}")
    print(f"checkpoint: {rec.checkpoint} sha256 {rec.checkpoint_digest}")
    print(f"record: {out / 'finetune_record.json'}")
    for f in figs:
        print(f"figure: {f}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    if not cfg.eval.checkpoint:
        raise ConfigError("eval needs a checkpoint: set eval.checkpoint (e.g. --set eval.checkpoint=run/model.ckpt)")
    man = _manifest(cfg, out)
    model = load_model(cfg.eval.checkpoint)
    cm = evaluate_entries(model, man, man.split(cfg.eval.split))
    report = MetricsReport.from_runs([compute_metrics(cm)], [cm])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text("ACC SEN SPE PRE F1\n" + report.row() + "\n", encoding="utf-8")
    print(f"confusion: {asdict(cm)}")
    print("ACC SEN SPE PRE F1")
    print(report.row())
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    seeds = _parse_seeds(args.seeds, cfg.seeds)
    man = _manifest(cfg, out)
    result = run_ablation(cfg, seeds, man, out)
    print(f"seeds: {seeds}")
    print(result.text())
    for name in ("ablation.json", "ablation.txt", "ablation.csv"):
        print(f"output: {out / name}")
    print(f"figures: {out / 'figures'}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    worst = 0.0
    for name, fn in SUITES.items():
        err = fn()
        worst = max(worst, err)
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<30} max relative error {err:.3e}  {status}")
    print(f"tolerance {TOLERANCE:.0e}; worst {worst:.3e}")
    return 0 if worst < TOLERANCE else 2


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic clip dataset", "mvcc_data"),
    "pretrain": (cmd_pretrain, "masked video modeling pretraining", "runs/pretrain"),
    "finetune": (cmd_finetune, "fine-tune the classifier (CE + contrastive arm)", "runs/finetune"),
    "eval": (cmd_eval, "score a fine-tuned checkpoint on a manifest split", "runs/eval"),
    "ablate": (cmd_ablate, f"run the arms {', '.join(ARMS)} over shared seeds", "runs/ablate"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient checks", "runs/gradcheck"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mvcc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, default_out) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file; sections: manifest, seeds, data, model, augment, pretrain, finetune, eval")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable (e.g. finetune.epochs=5)")
        p.add_argument("--out", default=default_out, help=f"output directory (default {default_out})")
        p.add_argument("--seeds", help="comma-separated seeds (ablate), overrides the config's seeds")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides)
        return fn(cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            print("valid config keys: " + ", ".join(schema_keys()), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
