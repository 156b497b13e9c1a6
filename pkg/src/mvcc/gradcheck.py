"""Central finite-difference checks of the analytic gradients (float64).

Relative error is measured against the gradient's scale:
``max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)``,
which stays meaningful when individual entries are near zero.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .losses import ContrastiveConfig, l_con, masked_mse, supcon_baseline, total_loss
from .masking import make_mask_plan
from .model import DecoderConfig, EncoderConfig, MVCCModel

TOLERANCE = 1e-4


def numeric_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item())
    if scale == 0.0:
        return 0.0
    return (analytic - numeric).abs().max().item() / scale


def check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-6) -> float:
    return relative_error(analytic_grad(f, x), numeric_grad(f, x, h))


def _embedding_batch(seed: int, B: int = 6, D: int = 8):
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(B, D, generator=g, dtype=torch.float64)
    labels = torch.tensor([i % 2 for i in range(B)])
    return e, labels


def check_l_con(seed: int = 0, tau: float = 0.1, B: int = 6, D: int = 8) -> float:
    """d l_con / d embeddings, through normalization and the correlation weights."""
    e, labels = _embedding_batch(seed, B, D)
    cfg = ContrastiveConfig(tau=tau)
    return check(lambda x: l_con(x, labels, cfg), e)


def check_supcon(seed: int = 0, tau: float = 0.1, B: int = 6, D: int = 8) -> float:
    e, labels = _embedding_batch(seed, B, D)
    return check(lambda x: supcon_baseline(x, labels, tau), e)


def micro_configs() -> tuple[EncoderConfig, DecoderConfig]:
    """T=2 frames, P=4 patches, D=8, one divided block."""
    enc = EncoderConfig(patch_size=2, token_dim=8, depth=1, heads=2, mlp_ratio=2.0, T=2, H=4, W=4, C=1)
    dec = DecoderConfig(token_dim=8, depth=1, heads=2, mlp_ratio=2.0)
    return enc, dec


def check_parameters(model: torch.nn.Module, loss: Callable[[], torch.Tensor], h: float = 1e-6) -> float:
    """Compare backprop gradients of ``loss()`` with central differences over every parameter."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss().backward()
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss())
                flat[i] = orig - h
                fm = float(loss())
                flat[i] = orig
                numeric.append((fp - fm) / (2 * h))
    return relative_error(analytic, torch.tensor(numeric, dtype=analytic.dtype))


def check_masked_mse_pipeline(seed: int = 0, alpha: float = 0.5, beta_pct: float = 50.0) -> float:
    """d masked_mse(decode(encode(visible))) / d every model parameter."""
    enc, dec = micro_configs()
    torch.manual_seed(seed)
    model = MVCCModel(enc, dec).double()
    g = torch.Generator().manual_seed(seed + 1)
    pixels = torch.rand(2, enc.T, enc.H, enc.W, enc.C, generator=g, dtype=torch.float64)
    plans = [make_mask_plan(enc.T, enc.P, alpha, beta_pct, seed + 10 + i) for i in range(2)]
    mask = torch.from_numpy(np.stack([p.mask_grid() for p in plans]))

    def loss() -> torch.Tensor:
        pred, target, _ = model.pretrain_forward(pixels, mask)
        return masked_mse(pred, target, mask.reshape(2, -1))

    return check_parameters(model, loss)


def check_finetune_objective(seed: int = 0) -> float:
    """d (CE + 0.1 * l_con) / d every parameter, full-grid encoder path."""
    enc, _ = micro_configs()
    torch.manual_seed(seed)
    model = MVCCModel(enc).double()
    g = torch.Generator().manual_seed(seed + 1)
    pixels = torch.rand(4, enc.T, enc.H, enc.W, enc.C, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 0, 1])

    def loss() -> torch.Tensor:
        logits, q = model(pixels)
        return total_loss(logits, labels, q, ContrastiveConfig(tau=0.1, lambda_=0.1), "cscl")[0]

    return check_parameters(model, loss)


SUITES: dict[str, Callable[[], float]] = {
    "l_con": check_l_con,
    "supcon_baseline": check_supcon,
    "masked_mse(decode(encode))": check_masked_mse_pipeline,
    "ce+lambda*l_con(encode)": check_finetune_objective,
}


def run_all() -> dict[str, float]:
    return {name: fn() for name, fn in SUITES.items()}
