"""Dual-level (frame + patch) masking and patch/token bookkeeping.

A video of ``T`` frames, each cut into ``P`` non-overlapping ``p x p``
patches, forms a ``T x P`` token grid. Masking first removes
``round(alpha * T)`` whole frames, then ``round(beta_pct / 100 * P)``
patches inside every surviving frame, so the masked share of the grid is
``alpha' + (1 - alpha') * beta'`` with ``alpha'`` and ``beta'`` the
rounded ratios.

Random draw order (replayable from the seed)::

    rng = numpy.random.default_rng(seed)
    masked_frames = rng.choice(T, size=n_frames, replace=False)
    for f in kept_frames (ascending):
        rng.choice(P, size=n_patches, replace=False)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ContractError


def round_half_up(x) -> int:
    """Round to nearest integer, halves up, using the decimal form of floats.

    ``0.3 * 5`` rounds to 2 here, matching what a reader of the config
    expects, instead of 1 from the binary value ``1.4999...``.
    """
    if isinstance(x, float):
        x = Fraction(repr(x))
    return math.floor(Fraction(x) + Fraction(1, 2))


def masked_frame_count(T: int, alpha: float) -> int:
    return round_half_up(Fraction(repr(float(alpha))) * T)


def masked_patch_count(P: int, beta_pct: float) -> int:
    return round_half_up(Fraction(repr(float(beta_pct))) * P / 100)


@dataclass
class MaskPlan:
    """Which frames are dropped and which patches are dropped in kept frames."""

    alpha: float
    beta_pct: float
    T: int
    P: int
    kept_frames: list[int]
    masked_patches_per_kept_frame: dict[int, list[int]]
    seed: int | None = None

    @property
    def grid(self) -> tuple[int, int]:
        return (self.T, self.P)

    @property
    def masked_frames(self) -> list[int]:
        kept = set(self.kept_frames)
        return [f for f in range(self.T) if f not in kept]

    def mask_grid(self) -> np.ndarray:
        """Boolean ``(T, P)`` array, True where a token is masked."""
        m = np.ones((self.T, self.P), dtype=bool)
        for f in self.kept_frames:
            m[f] = False
            m[f, self.masked_patches_per_kept_frame[f]] = True
        return m

    @property
    def mask_positions(self) -> list[tuple[int, int]]:
        return [tuple(x) for x in np.argwhere(self.mask_grid()).tolist()]

    @property
    def visible_positions(self) -> list[tuple[int, int]]:
        return [tuple(x) for x in np.argwhere(~self.mask_grid()).tolist()]

    @property
    def masked_count(self) -> int:
        per_frame = sum(len(v) for v in self.masked_patches_per_kept_frame.values())
        return len(self.masked_frames) * self.P + per_frame

    def total_masked_fraction(self) -> Fraction:
        return Fraction(self.masked_count, self.T * self.P)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta_pct": self.beta_pct,
            "grid": [self.T, self.P],
            "kept_frames": list(self.kept_frames),
            "masked_patches_per_kept_frame": {
                str(f): list(v) for f, v in sorted(self.masked_patches_per_kept_frame.items())
            },
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MaskPlan:
        T, P = d["grid"]
        return cls(
            alpha=d["alpha"],
            beta_pct=d["beta_pct"],
            T=T,
            P=P,
            kept_frames=list(d["kept_frames"]),
            masked_patches_per_kept_frame={int(k): list(v) for k, v in d["masked_patches_per_kept_frame"].items()},
            seed=d.get("seed"),
        )


def make_mask_plan(T: int, P: int, alpha: float, beta_pct: float, rng_state=None) -> MaskPlan:
    """Draw a dual-level mask plan.

    ``alpha`` is the fraction of frames masked outright; ``beta_pct`` the
    percentage of patches masked in each remaining frame. ``rng_state`` is
    an int seed or a ``numpy.random.Generator``.
    """
    if T < 1 or P < 1:
        raise ConfigError("T and P must be >= 1")
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must be in [0, 1), got {alpha}")
    if not 0.0 <= beta_pct <= 100.0:
        raise ConfigError(f"beta_pct must be in [0, 100], got {beta_pct}")
    n_frames = masked_frame_count(T, alpha)
    if n_frames >= T:
        raise ConfigError(f"alpha={alpha} masks all {T} frames; at least one frame must survive")
    n_patches = masked_patch_count(P, beta_pct)

    seed = int(rng_state) if isinstance(rng_state, (int, np.integer)) else None
    rng = np.random.default_rng(rng_state)
    dropped = set(rng.choice(T, size=n_frames, replace=False).tolist())
    kept = [f for f in range(T) if f not in dropped]
    per_frame = {f: sorted(rng.choice(P, size=n_patches, replace=False).tolist()) for f in kept}
    return MaskPlan(alpha, beta_pct, T, P, kept, per_frame, seed)


# ---------------------------------------------------------------------------
# patch grids


@dataclass
class TokenGrid:
    """Every patch of a clip as a flat pixel vector, frame-major, row-major."""

    tokens: np.ndarray  # (T * P, p * p * C)
    T: int
    P: int
    patch_size: int
    frame_shape: tuple[int, int, int]  # (H, W, C)

    @property
    def positions(self) -> list[tuple[int, int]]:
        return [(f, j) for f in range(self.T) for j in range(self.P)]


@dataclass
class TokenBatch:
    tokens: np.ndarray  # (N_visible, p * p * C)
    token_positions: list[tuple[int, int]]
    mask_positions: list[tuple[int, int]]
    patch_size: int
    grid: tuple[int, int] = field(default=(0, 0))


def patchify_array(pixels, p: int):
    """``(..., T, H, W, C)`` -> ``(..., T, P, p*p*C)``; works on numpy arrays and torch tensors."""
    *lead, T, H, W, C = pixels.shape
    if H % p or W % p:
        raise ConfigError(f"frame size {H}x{W} is not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = pixels.reshape(*lead, T, gh, p, gw, p, C)
    n = len(lead)
    order = list(range(n)) + [n + i for i in (0, 1, 3, 2, 4, 5)]
    x = x.transpose(*order) if isinstance(x, np.ndarray) else x.permute(*order)
    return x.reshape(*lead, T, gh * gw, p * p * C)


def unpatchify_array(tokens, p: int, H: int, W: int, C: int):
    """Inverse of :func:`patchify_array`."""
    *lead, T, P, _ = tokens.shape
    gh, gw = H // p, W // p
    if gh * gw != P:
        raise ContractError(f"{P} patches do not tile a {H}x{W} frame with patch size {p}")
    x = tokens.reshape(*lead, T, gh, gw, p, p, C)
    n = len(lead)
    order = list(range(n)) + [n + i for i in (0, 1, 3, 2, 4, 5)]
    x = x.transpose(*order) if isinstance(x, np.ndarray) else x.permute(*order)
    return x.reshape(*lead, T, H, W, C)


def patchify(clip, p: int) -> TokenGrid:
    """Cut a clip (``VideoClip`` or ``(T, H, W, C)`` array) into its token grid."""
    pixels = np.asarray(getattr(clip, "pixels", clip))
    T, H, W, C = pixels.shape
    grid = patchify_array(pixels, p)
    P = grid.shape[1]
    return TokenGrid(np.ascontiguousarray(grid.reshape(T * P, -1)), T, P, p, (H, W, C))


def unpatchify(grid: TokenGrid) -> np.ndarray:
    H, W, C = grid.frame_shape
    return unpatchify_array(grid.tokens.reshape(grid.T, grid.P, -1), grid.patch_size, H, W, C)


def apply_mask(grid: TokenGrid, plan: MaskPlan) -> TokenBatch:
    """Keep the visible tokens of ``grid`` (in grid order) and list the masked positions."""
    if plan.grid != (grid.T, grid.P):
        raise ContractError(f"mask plan grid {plan.grid} does not match token grid {(grid.T, grid.P)}")
    mask = plan.mask_grid().ravel()
    positions = grid.positions
    visible = np.flatnonzero(~mask)
    return TokenBatch(
        tokens=grid.tokens[visible],
        token_positions=[positions[i] for i in visible],
        mask_positions=[positions[i] for i in np.flatnonzero(mask)],
        patch_size=grid.patch_size,
        grid=(grid.T, grid.P),
    )
