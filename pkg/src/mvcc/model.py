"""Divided space-time attention encoder, reconstruction decoder and classifier head.

Tokens carry explicit ``(frame, patch)`` positions, so the encoder can run
on any subset of the grid (the visible tokens during pretraining) as well
as on the full grid (fine-tuning). On the full grid the temporal and
spatial sub-blocks reshape into per-patch / per-frame sequences; on a
subset they fall back to dense attention with a same-patch / same-frame
mask. Both routes compute the same function.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError
from .masking import patchify_array


@dataclass
class EncoderConfig:
    patch_size: int = 8
    token_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    T: int = 16
    H: int = 64
    W: int = 64
    C: int = 1
    # fixed input standardization before the patch projection
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    @property
    def P(self) -> int:
        return (self.H // self.patch_size) * (self.W // self.patch_size)

    @property
    def pixel_dim(self) -> int:
        return self.patch_size * self.patch_size * self.C

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by heads {self.heads}")
        if min(self.T, self.H, self.W, self.C, self.patch_size) < 1:
            raise ConfigError("T, H, W, C and patch_size must be >= 1")
        if self.H % self.patch_size or self.W % self.patch_size:
            raise ConfigError(f"frame size {self.H}x{self.W} is not divisible by patch size {self.patch_size}")
        if not self.pixel_std > 0:
            raise ConfigError("pixel_std must be > 0")


@dataclass
class DecoderConfig:
    token_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ConfigError(f"decoder token_dim {self.token_dim} is not divisible by heads {self.heads}")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: (B, N, D). ``allowed``: optional (B, N, N) bool, True where i may attend to j."""
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * self.scale
        if allowed is not None:
            att = att.masked_fill(~allowed[:, None], float("-inf"))
        att = att.softmax(dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(B, N, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TokenLayout:
    """Positions of a token sequence: ``(B, N, 2)`` long tensor of (frame, patch).

    ``full_grid`` is set when the sequence is the whole ``T x P`` grid in
    frame-major order, which enables the reshape route.
    """

    def __init__(self, positions: torch.Tensor, full_grid: tuple[int, int] | None = None):
        self.positions = positions
        self.full_grid = full_grid
        self._masks: dict[str, torch.Tensor] = {}

    @classmethod
    def grid(cls, batch: int, T: int, P: int, device=None) -> TokenLayout:
        f = torch.arange(T, device=device).repeat_interleave(P)
        j = torch.arange(P, device=device).repeat(T)
        pos = torch.stack([f, j], dim=-1).expand(batch, T * P, 2)
        return cls(pos, full_grid=(T, P))

    def same(self, axis: int) -> torch.Tensor:
        key = str(axis)
        if key not in self._masks:
            a = self.positions[..., axis]
            self._masks[key] = a[:, :, None] == a[:, None, :]
        return self._masks[key]


class DividedBlock(nn.Module):
    """Temporal attention -> spatial attention -> MLP, each pre-norm with a residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = Attention(dim, heads)
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = Attention(dim, heads)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def temporal(self, x: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        """Attend across frames among tokens that share a patch index."""
        h = self.norm_t(x)
        if layout.full_grid is not None:
            T, P = layout.full_grid
            B, _, D = h.shape
            h = h.reshape(B, T, P, D).transpose(1, 2).reshape(B * P, T, D)
            h = self.attn_t(h).reshape(B, P, T, D).transpose(1, 2).reshape(B, T * P, D)
        else:
            h = self.attn_t(h, layout.same(1))
        return x + h

    def spatial(self, x: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        """Attend across patches among tokens that share a frame index."""
        h = self.norm_s(x)
        if layout.full_grid is not None:
            T, P = layout.full_grid
            B, _, D = h.shape
            h = self.attn_s(h.reshape(B * T, P, D)).reshape(B, T * P, D)
        else:
            h = self.attn_s(h, layout.same(0))
        return x + h

    def forward(self, x: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        x = self.temporal(x, layout)
        x = self.spatial(x, layout)
        return x + self.mlp(self.norm_m(x))


class JointBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class VideoEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.token_dim
        self.patch_embed = nn.Linear(cfg.pixel_dim, D)
        self.pos_time = nn.Parameter(torch.zeros(cfg.T, D))
        self.pos_space = nn.Parameter(torch.zeros(cfg.P, D))
        self.blocks = nn.ModuleList(DividedBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(D)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_time, std=0.02)
        nn.init.trunc_normal_(self.pos_space, std=0.02)

    def embed_tokens(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Project standardized ``(B, N, p*p*C)`` pixels to ``D`` and add ``pos_time[f] + pos_space[j]``."""
        if tokens.shape[-1] != self.cfg.pixel_dim:
            raise ContractError(f"token pixel dim {tokens.shape[-1]} != {self.cfg.pixel_dim}")
        f, j = positions[..., 0], positions[..., 1]
        if f.numel() and (f.min() < 0 or f.max() >= self.cfg.T or j.min() < 0 or j.max() >= self.cfg.P):
            raise ContractError(f"token position outside the {self.cfg.T}x{self.cfg.P} grid")
        x = (tokens - self.cfg.pixel_mean) / self.cfg.pixel_std
        return self.patch_embed(x) + self.pos_time[f] + self.pos_space[j]

    def encode(self, x: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        if x.shape[1] == 0:
            raise ContractError("encoder input sequence is empty")
        for blk in self.blocks:
            x = blk(x, layout)
        return self.norm(x)

    def forward(self, tokens: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
        return self.encode(self.embed_tokens(tokens, layout.positions), layout)

    @staticmethod
    def pool(h: torch.Tensor) -> torch.Tensor:
        return h.mean(dim=1)


class ReconstructionDecoder(nn.Module):
    """Lightweight joint-attention decoder over the full token grid."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        Dd = cfg.token_dim
        self.embed = nn.Linear(enc_cfg.token_dim, Dd)
        self.mask_token = nn.Parameter(torch.zeros(Dd))
        self.pos_time = nn.Parameter(torch.zeros(enc_cfg.T, Dd))
        self.pos_space = nn.Parameter(torch.zeros(enc_cfg.P, Dd))
        self.blocks = nn.ModuleList(JointBlock(Dd, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(Dd)
        self.head = nn.Linear(Dd, enc_cfg.pixel_dim)
        self.apply(_init_weights)
        for p in (self.mask_token, self.pos_time, self.pos_space):
            nn.init.trunc_normal_(p, std=0.02)

    def forward(self, latents: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Predict pixels for every grid position.

        ``latents``: (B, Nv, D) encoder outputs at ``positions`` (B, Nv, 2).
        Returns (B, T*P, p*p*C) in frame-major grid order.
        """
        T, P = self.enc_cfg.T, self.enc_cfg.P
        B = latents.shape[0]
        flat = positions[..., 0] * P + positions[..., 1]
        x = self.mask_token.expand(B, T * P, -1)
        if latents.shape[1]:
            vis = self.embed(latents)
            x = x.scatter(1, flat[..., None].expand(-1, -1, vis.shape[-1]), vis)
        x = x + (self.pos_time[:, None, :] + self.pos_space[None, :, :]).reshape(T * P, -1)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


def _check_cover(vis: torch.Tensor, masked: torch.Tensor, T: int, P: int) -> None:
    for b in range(vis.shape[0]):
        keys = torch.cat([vis[b, :, 0] * P + vis[b, :, 1], masked[b, :, 0] * P + masked[b, :, 1]])
        if keys.numel() != T * P or torch.unique(keys).numel() != T * P:
            raise ContractError("visible and masked positions must partition the token grid")


def decode(
    decoder: ReconstructionDecoder,
    latents: torch.Tensor,
    visible_positions: torch.Tensor,
    mask_positions: torch.Tensor,
) -> torch.Tensor:
    """Reconstructed pixels ``(B, N_mask, p*p*C)`` for each masked position, in the given order."""
    T, P = decoder.enc_cfg.T, decoder.enc_cfg.P
    _check_cover(visible_positions, mask_positions, T, P)
    full = decoder(latents, visible_positions)
    idx = mask_positions[..., 0] * P + mask_positions[..., 1]
    return full.gather(1, idx[..., None].expand(-1, -1, full.shape[-1]))


def visible_layout(mask: torch.Tensor) -> tuple[torch.Tensor, TokenLayout]:
    """Flat grid indices and layout of the unmasked tokens.

    ``mask``: (B, T, P) bool. Every row must hide the same number of tokens.
    """
    B, T, P = mask.shape
    keep = ~mask.reshape(B, T * P)
    counts = keep.sum(dim=1)
    if B and not bool((counts == counts[0]).all()):
        raise ContractError("all clips in a batch must have the same number of visible tokens")
    idx = torch.nonzero(keep)[:, 1].reshape(B, -1)
    pos = torch.stack([idx // P, idx % P], dim=-1)
    return idx, TokenLayout(pos)


class MVCCModel(nn.Module):
    """Encoder + classifier head, with the reconstruction decoder attached for pretraining."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig | None = None, num_classes: int = 2):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.encoder = VideoEncoder(enc_cfg)
        self.decoder = ReconstructionDecoder(enc_cfg, dec_cfg) if dec_cfg is not None else None
        self.head = nn.Linear(enc_cfg.token_dim, num_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, C) -> (B, T*P, p*p*C)."""
        t = patchify_array(pixels, self.enc_cfg.patch_size)
        return t.reshape(t.shape[0], -1, t.shape[-1])

    def pretrain_forward(self, pixels: torch.Tensor, mask: torch.Tensor):
        """Encode only visible tokens, reconstruct the whole grid.

        Returns ``(pred, target, latents)`` with ``pred``/``target`` of shape
        (B, T*P, p*p*C); the loss must read masked positions only.
        """
        if self.decoder is None:
            raise ContractError("model was built without a decoder")
        target = self.tokens(pixels)
        idx, layout = visible_layout(mask)
        visible = target.gather(1, idx[..., None].expand(-1, -1, target.shape[-1]))
        latents = self.encoder(visible, layout)
        return self.decoder(latents, layout.positions), target, latents

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Pooled representation ``q`` of whole (unmasked) clips."""
        tok = self.tokens(pixels)
        layout = TokenLayout.grid(tok.shape[0], self.enc_cfg.T, self.enc_cfg.P, device=tok.device)
        return self.encoder.pool(self.encoder(tok, layout))

    def classify(self, q: torch.Tensor) -> torch.Tensor:
        return self.head(q)

    def forward(self, pixels: torch.Tensor):
        q = self.features(pixels)
        return self.classify(q), q


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

