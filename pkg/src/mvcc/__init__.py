"""Masked video modeling with correlation-aware contrastive fine-tuning."""

from .data import AugmentationConfig, GeneratorParams, Manifest, VideoClip, augment, generate_synthetic_dataset, load_clip, write_clip
from .evaluation import ConfusionMatrix, MetricsReport, compute_metrics, evaluate
from .losses import ContrastiveConfig, l_con, l_pull, l_push, masked_mse, supcon_baseline, total_loss
from .masking import MaskPlan, apply_mask, make_mask_plan, patchify, unpatchify
from .model import DecoderConfig, EncoderConfig, MVCCModel

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "GeneratorParams", "Manifest", "VideoClip", "augment", "generate_synthetic_dataset",
    "load_clip", "write_clip", "ConfusionMatrix", "MetricsReport", "compute_metrics", "evaluate",
    "ContrastiveConfig", "l_con", "l_pull", "l_push", "masked_mse", "supcon_baseline", "total_loss",
    "MaskPlan", "apply_mask", "make_mask_plan", "patchify", "unpatchify",
    "DecoderConfig", "EncoderConfig", "MVCCModel",
]
