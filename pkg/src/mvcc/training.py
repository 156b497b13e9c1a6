"""Pretraining and fine-tuning loops, repeated-seed runs.

All randomness is derived from ``TrainConfig.seed``: torch's generator for
weight init, and ``numpy.random.default_rng([seed, stream, step, i])`` for
per-clip masks and augmentations, so a run is a pure function of its
config and data.
"""

from __future__ import annotations

import copy
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import ExperimentConfig, TrainConfig, config_digest, from_dict, to_dict
from .data import AugmentationConfig, Manifest, augment_pixels, stratified_order
from .errors import ConfigError, DomainError
from .evaluation import ConfusionMatrix, MetricsReport, compute_metrics, evaluate_entries, predict
from .losses import ContrastiveConfig, masked_mse, total_loss
from .masking import make_mask_plan
from .model import DecoderConfig, EncoderConfig, MVCCModel

# rng stream ids
_MASK, _AUG_PRE, _AUG_FT = 1, 2, 3


def configure_threads() -> None:
    n = os.environ.get("MVCC_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            pass


@dataclass
class RunRecord:
    stage: str
    config: dict
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    mask_stats: list[list[int]] = field(default_factory=list)
    checkpoint: str = ""
    checkpoint_digest: str = ""
    wall_time: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    def trajectory(self) -> dict:
        """Everything except wall time; equal across deterministic replays."""
        d = asdict(self)
        d.pop("wall_time")
        return d

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunRecord:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _sgd(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _augment_batch(pixels: np.ndarray, aug: AugmentationConfig | None, seed: int, stream: int, step: int) -> np.ndarray:
    if aug is None:
        return pixels
    return np.stack([augment_pixels(p, aug, [seed, stream, step, i]) for i, p in enumerate(pixels)])


def _encoder_tensors(model: MVCCModel) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if k.startswith("encoder.")}


def _log_line(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def pretrain(
    manifest: Manifest,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    out_dir: str | os.PathLike | None = None,
    aug_cfg: AugmentationConfig | None = None,
) -> tuple[RunRecord, MVCCModel]:
    """Masked video modeling on the train split; labels are never read.

    Saves ``encoder.ckpt`` (encoder weights only) and ``pretrain_log.jsonl``
    into ``out_dir`` when given.
    """
    cfg.validate()
    if cfg.stage != "pretrain":
        raise ConfigError("pretrain() needs a TrainConfig with stage='pretrain'")
    alpha, beta = cfg.mask_ratios()
    configure_threads()
    t0 = time.perf_counter()

    entries = manifest.split("train")
    if not entries:
        raise DomainError("train split is empty")
    pixels = manifest.load_pixels(entries)
    n = len(pixels)

    torch.manual_seed(cfg.seed)
    model = MVCCModel(enc_cfg, dec_cfg)
    opt = _sgd(model, cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    aug = aug_cfg if cfg.augment else None
    T, P = enc_cfg.T, enc_cfg.P

    record = RunRecord("pretrain", {"train": to_dict(cfg), "encoder": to_dict(enc_cfg), "decoder": to_dict(dec_cfg)})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = open(out / "pretrain_log.jsonl", "w", encoding="utf-8") if out is not None else None

    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(n)
            epoch_loss = []
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch = _augment_batch(pixels[idx], aug, cfg.seed, _AUG_PRE, step)
                plans = [make_mask_plan(T, P, alpha, beta, np.random.default_rng([cfg.seed, _MASK, step, i])) for i in range(len(idx))]
                mask = torch.from_numpy(np.stack([p.mask_grid() for p in plans]))
                pred, target, _ = model.pretrain_forward(torch.from_numpy(batch), mask)
                loss = masked_mse(pred, target, mask.reshape(len(idx), -1))
                opt.zero_grad()
                loss.backward()
                opt.step()

                value = float(loss.detach())
                record.step_losses.append(value)
                record.mask_stats.append([len(plans[0].masked_frames), len(plans[0].masked_patches_per_kept_frame[plans[0].kept_frames[0]])])
                epoch_loss.append(value)
                _log_line(log, {"step": step, "epoch": epoch, "mse": value})
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            record.epoch_losses.append(float(np.mean(epoch_loss)))
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if log is not None:
            log.close()

    if out is not None:
        path = out / "encoder.ckpt"
        record.checkpoint = str(path)
        record.checkpoint_digest = save_checkpoint(path, _encoder_tensors(model), {"encoder": to_dict(enc_cfg)})
    record.wall_time = time.perf_counter() - t0
    if out is not None:
        record.save(out / "pretrain_record.json")
    return record, model


def load_encoder(model: MVCCModel, path: str | os.PathLike) -> None:
    tensors, _ = load_checkpoint(path)
    enc = {k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")}
    load_into(model.encoder, enc)


def load_model(path: str | os.PathLike) -> MVCCModel:
    """Rebuild a fine-tuned classifier from its checkpoint."""
    tensors, configs = load_checkpoint(path)
    model = MVCCModel(from_dict(EncoderConfig, configs["encoder"]))
    load_into(model, tensors)
    model.eval()
    return model


def _stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = stratified_order(labels, rng)
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


@torch.no_grad()
def _val_score(model: MVCCModel, pixels: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    _, logits = predict(model, pixels)
    logits_t = torch.from_numpy(logits)
    y = torch.from_numpy(labels)
    acc = float((logits_t.argmax(1) == y).double().mean()) * 100.0
    return acc, float(F.cross_entropy(logits_t, y))


def finetune(
    manifest: Manifest,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    init: str | os.PathLike | None = None,
    out_dir: str | os.PathLike | None = None,
    aug_cfg: AugmentationConfig | None = None,
) -> tuple[RunRecord, MVCCModel]:
    """Supervised fine-tuning with cross-entropy plus the configured contrastive arm.

    ``init`` is an encoder (or full model) checkpoint; ``None`` trains from
    scratch. The weights with the best validation accuracy (ties broken by
    lower validation cross-entropy) are kept; without a validation split the
    final weights are kept.
    """
    cfg.validate()
    if cfg.stage != "finetune":
        raise ConfigError("finetune() needs a TrainConfig with stage='finetune'")
    configure_threads()
    t0 = time.perf_counter()

    train = manifest.split("train")
    val = manifest.split("val")
    if not train:
        raise DomainError("train split is empty")
    pixels = manifest.load_pixels(train)
    labels = np.array([e.label for e in train], dtype=np.int64)
    val_pixels = manifest.load_pixels(val) if val else None
    val_labels = np.array([e.label for e in val], dtype=np.int64)

    torch.manual_seed(cfg.seed)
    model = MVCCModel(enc_cfg)
    init = init or cfg.init_checkpoint or None
    if init:
        load_encoder(model, init)
    opt = _sgd(model, cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    aug = aug_cfg if cfg.augment else None
    ccfg = ContrastiveConfig(tau=cfg.tau, lambda_=cfg.lambda_ if cfg.contrastive_arm != "none" else 0.0)

    record = RunRecord("finetune", {"train": to_dict(cfg), "encoder": to_dict(enc_cfg), "init": str(init or "")})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = open(out / "finetune_log.jsonl", "w", encoding="utf-8") if out is not None else None

    best_key, best_state = None, None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            epoch_loss = []
            for idx in _stratified_batches(labels, cfg.batch_size, rng):
                batch = _augment_batch(pixels[idx], aug, cfg.seed, _AUG_FT, step)
                y = torch.from_numpy(labels[idx])
                logits, q = model(torch.from_numpy(batch))
                loss, comps = total_loss(logits, y, q, ccfg, cfg.contrastive_arm)
                opt.zero_grad()
                loss.backward()
                opt.step()

                record.step_losses.append(comps["total"])
                epoch_loss.append(comps["total"])
                _log_line(log, {"step": step, **comps})
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            record.epoch_losses.append(float(np.mean(epoch_loss)))
            if val_pixels is not None:
                acc, vloss = _val_score(model, val_pixels, val_labels)
                record.val_accuracy.append(acc)
                key = (acc, -vloss)
                if best_key is None or key > best_key:
                    best_key, best_state = key, copy.deepcopy(model.state_dict())
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if log is not None:
            log.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out is not None:
        path = out / "model.ckpt"
        record.checkpoint = str(path)
        record.checkpoint_digest = save_checkpoint(path, model.state_dict(), {"encoder": to_dict(enc_cfg)})
    record.wall_time = time.perf_counter() - t0
    if out is not None:
        record.save(out / "finetune_record.json")
    return record, model


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    c = copy.deepcopy(cfg)
    c.seed = seed
    return c


def run_seed(
    exp: ExperimentConfig,
    manifest: Manifest,
    seed: int,
    pretrain_cfg: TrainConfig | None,
    finetune_cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    split: str = "test",
) -> tuple[dict, ConfusionMatrix, list[RunRecord]]:
    """Optional pretraining, then fine-tuning and evaluation, all under one seed."""
    out = Path(out_dir) if out_dir is not None else None
    records = []
    init = None
    if pretrain_cfg is not None:
        rec, pre_model = pretrain(
            manifest, _with_seed(pretrain_cfg, seed), exp.model.encoder, exp.model.decoder,
            out / "pretrain" if out else None, exp.augment,
        )
        records.append(rec)
        if out is not None:
            init = rec.checkpoint
        else:
            init = _tmp_encoder(pre_model)
    rec, model = finetune(
        manifest, _with_seed(finetune_cfg, seed), exp.model.encoder, init,
        out / "finetune" if out else None, exp.augment,
    )
    records.append(rec)
    if init is not None and out is None:
        os.unlink(init)
    cm = evaluate_entries(model, manifest, manifest.split(split))
    return compute_metrics(cm), cm, records


def _tmp_encoder(model: MVCCModel) -> str:
    fd, path = tempfile.mkstemp(suffix=".ckpt")
    os.close(fd)
    save_checkpoint(path, _encoder_tensors(model), {"encoder": to_dict(model.enc_cfg)})
    return path


def run_repeated(
    exp: ExperimentConfig,
    seeds: list[int],
    manifest: Manifest,
    out_dir: str | os.PathLike | None = None,
    with_pretrain: bool = True,
    split: str = "test",
) -> tuple[MetricsReport, list[RunRecord]]:
    """Run the full pipeline once per seed and aggregate metrics as mean(std)."""
    if not seeds:
        raise DomainError("seed list is empty")
    per_seed, cms, records = [], [], []
    for seed in seeds:
        sub = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
        metrics, cm, recs = run_seed(
            exp, manifest, seed, exp.pretrain if with_pretrain else None, exp.finetune, sub, split
        )
        per_seed.append(metrics)
        cms.append(cm)
        records.extend(recs)
    return MetricsReport.from_runs(per_seed, cms, config_digest(exp)), records
