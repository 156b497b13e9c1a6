"""Training objectives.

* :func:`masked_mse` -- pixel reconstruction error on masked tokens only.
* :func:`l_con` -- correlation-aware contrastive loss. Each anchor ``q`` is
  compared with a similarity-weighted average of its same-label batch
  mates (``q_hat``) and of its other-label batch mates (``q_check``):
  ``|q - q_hat|_1 + max(1 - |q - q_check|_1, 0)``.
* :func:`supcon_baseline` -- the usual supervised contrastive loss, kept as
  an ablation arm.
* :func:`total_loss` -- cross-entropy plus ``lambda`` times the chosen
  contrastive term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DomainError

CONTRASTIVE_ARMS = ("none", "scl", "cscl")


class EmptySetError(DomainError):
    """Raised when a correlated representation is requested over an empty set."""


@dataclass
class ContrastiveConfig:
    """``tau``: softmax temperature of the correlation weights.
    ``lambda_``: weight of the contrastive term next to cross-entropy.
    """

    tau: float = 0.1
    lambda_: float = 0.1
    normalize_embeddings: bool = True
    distance_reduction: str = "sum"

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.lambda_ >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if self.distance_reduction != "sum":
            raise ConfigError("only 'sum' distance reduction is supported")


def masked_mse(reconstructed: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over masked-token pixels.

    Without ``mask`` both tensors hold only the masked tokens. With
    ``mask`` (shape = leading dims of the tensors, True = masked) they hold
    the full grid and visible positions are ignored. An empty masked set
    gives 0.
    """
    if reconstructed.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(reconstructed.shape)} vs {tuple(target.shape)}")
    if mask is not None:
        if mask.shape != reconstructed.shape[: mask.dim()]:
            raise ContractError(f"mask shape {tuple(mask.shape)} does not match {tuple(reconstructed.shape)}")
        reconstructed = reconstructed[mask]
        target = target[mask]
    if reconstructed.numel() == 0:
        return reconstructed.sum() * 0.0
    return ((reconstructed - target) ** 2).mean()


def similarity(y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Cosine similarity ``y.z / (|y||z|)``."""
    ny, nz = torch.linalg.vector_norm(y), torch.linalg.vector_norm(z)
    if ny == 0 or nz == 0:
        raise DomainError("cosine similarity is undefined for a zero vector")
    return (y @ z) / (ny * nz)


def _correlated(q: torch.Tensor, keys: torch.Tensor, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if keys.shape[0] == 0:
        raise EmptySetError("no samples to build a correlated representation from")
    sims = torch.stack([similarity(q, k) for k in keys])
    w = torch.softmax(sims / tau, dim=0)
    return w @ keys, w


def correlated_positive(q: torch.Tensor, positives: torch.Tensor, tau: float):
    """``(q_hat, a)``: softmax(cos/tau)-weighted average of same-label embeddings."""
    return _correlated(q, positives, tau)


def correlated_negative(q: torch.Tensor, negatives: torch.Tensor, tau: float):
    """``(q_check, b)``: softmax(cos/tau)-weighted average of other-label embeddings."""
    return _correlated(q, negatives, tau)


def l_pull(q: torch.Tensor, q_hat: torch.Tensor) -> torch.Tensor:
    return (q - q_hat).abs().sum(dim=-1)


def l_push(q: torch.Tensor, q_check: torch.Tensor) -> torch.Tensor:
    return torch.clamp(1.0 - (q - q_check).abs().sum(dim=-1), min=0.0)


def _masked_softmax(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Row softmax over ``allowed`` entries; rows with nothing allowed become all zero."""
    has_any = allowed.any(dim=1, keepdim=True)
    z = logits.masked_fill(~allowed, float("-inf"))
    z = torch.where(has_any, z, torch.zeros_like(z))
    return torch.softmax(z, dim=1) * allowed


def _prepare(embeddings: torch.Tensor, labels: torch.Tensor, normalize: bool):
    if embeddings.dim() != 2:
        raise ContractError("embeddings must be a (B, D) matrix")
    if embeddings.shape[0] < 2:
        raise DomainError("contrastive losses need a batch of at least 2 embeddings")
    if labels.shape != embeddings.shape[:1]:
        raise ContractError("labels must have one entry per embedding")
    if not torch.isfinite(embeddings).all():
        raise DomainError("embeddings must be finite")
    e = F.normalize(embeddings, dim=1) if normalize else embeddings
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    return e, same & ~eye, ~same


def l_con(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    cfg: ContrastiveConfig | None = None,
    return_components: bool = False,
):
    """Batch correlation-aware contrastive loss.

    For each anchor the positives are the other rows with its label and the
    negatives the rows with the other label. A pull or push term whose set
    is empty is dropped; the loss is the mean over anchors that keep at
    least one term.

    With ``return_components`` returns ``(loss, pull_mean, push_mean)``
    where the means run over anchors that have the respective set.
    """
    cfg = cfg or ContrastiveConfig()
    cfg.validate()
    e, pos, neg = _prepare(embeddings, labels, cfg.normalize_embeddings)
    norm = torch.linalg.vector_norm(e, dim=1, keepdim=True)
    sims = (e @ e.T) / (norm * norm.T) / cfg.tau

    a = _masked_softmax(sims, pos)
    b = _masked_softmax(sims, neg)
    has_pos, has_neg = pos.any(dim=1), neg.any(dim=1)

    pull = l_pull(e, a @ e) * has_pos
    push = l_push(e, b @ e) * has_neg
    active = has_pos | has_neg
    loss = (pull + push).sum() / active.sum()
    if not return_components:
        return loss
    zero = loss.new_zeros(())
    pull_mean = pull.sum() / has_pos.sum() if has_pos.any() else zero
    push_mean = push.sum() / has_neg.sum() if has_neg.any() else zero
    return loss, pull_mean, push_mean


def supcon_baseline(embeddings: torch.Tensor, labels: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Supervised contrastive loss on cosine similarities.

    ``-mean_i mean_{p in P(i)} log(exp(s_ip/tau) / sum_{a != i} exp(s_ia/tau))``
    over anchors ``i`` with at least one positive.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    e, pos, _ = _prepare(embeddings, labels, True)
    has_pos = pos.any(dim=1)
    if not has_pos.any():
        raise DomainError("no anchor in the batch has a positive")
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    logits = (e @ e.T / tau).masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~pos, 0.0)
    per_anchor = -log_prob.sum(dim=1)[has_pos] / pos.sum(dim=1)[has_pos]
    return per_anchor.mean()


def total_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    embeddings: torch.Tensor,
    cfg: ContrastiveConfig | None = None,
    arm: str = "cscl",
) -> tuple[torch.Tensor, dict[str, float]]:
    """``CE + lambda * contrastive``; returns the scalar and a float record for logging.

    Batches that cannot form the contrastive term (fewer than two clips, or
    no positive pair for ``scl``) contribute cross-entropy only.
    """
    cfg = cfg or ContrastiveConfig()
    cfg.validate()
    if arm not in CONTRASTIVE_ARMS:
        raise ConfigError(f"unknown contrastive arm {arm!r}")
    ce = F.cross_entropy(logits, labels)
    zero = ce.new_zeros(())
    con, pull, push = zero, zero, zero
    if arm != "none" and cfg.lambda_ > 0 and len(labels) >= 2:
        if arm == "cscl":
            con, pull, push = l_con(embeddings, labels, cfg, return_components=True)
        else:
            same = labels[:, None] == labels[None, :]
            if (same.sum() > len(labels)).item():
                con = supcon_baseline(embeddings, labels, cfg.tau)
    total = ce + cfg.lambda_ * con if arm != "none" else ce
    record = {
        "L_cls": float(ce.detach()),
        "L_pull_mean": float(pull.detach()),
        "L_push_mean": float(push.detach()),
        "L_con": float(con.detach()),
        "total": float(total.detach()),
    }
    return total, record
