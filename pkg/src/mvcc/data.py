"""Video clip container, clip file format, synthetic dataset and augmentations.

Clip files are binary::

    b"MVCC" | version:u8 | T:u32 | H:u32 | W:u32 | C:u32 | T*H*W*C float32

All integers and floats are little-endian; the payload is frame-major
(``T, H, W, C`` in C order). Labels are not stored in clip files, they live
in the dataset manifest.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ClipFormatError, ConfigError, DataError
from .masking import round_half_up

MAGIC = b"MVCC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sB4I")
SPLITS = ("train", "val", "test")


@dataclass
class VideoClip:
    """A ``(T, H, W, C)`` float32 clip with values in [0, 1].

    ``label`` is 0 (benign-like), 1 (malignant-like) or ``None`` for clips
    loaded without their manifest entry.
    """

    pixels: np.ndarray
    label: int | None = None
    clip_id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 4 or min(px.shape) < 1:
            raise ConfigError(f"clip must have shape (T, H, W, C) with all dims >= 1, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ConfigError("clip pixel values must be finite and in [0, 1]")
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"unknown label {self.label!r}")
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.pixels.shape)  # type: ignore[return-value]

    def check_patch_size(self, patch_size: int) -> None:
        _, h, w, _ = self.shape
        if h % patch_size or w % patch_size:
            raise ConfigError(f"frame size {h}x{w} is not divisible by patch size {patch_size}")


# ---------------------------------------------------------------------------
# clip file IO


def encode_clip(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype="<f4")
    t, h, w, c = px.shape
    return _HEADER.pack(MAGIC, FORMAT_VERSION, t, h, w, c) + np.ascontiguousarray(px).tobytes()


def decode_clip(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ClipFormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, t, h, w, c = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ClipFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise ClipFormatError(f"unsupported format version {version}", 4)
    for i, d in enumerate((t, h, w, c)):
        if d < 1:
            raise ClipFormatError("dimension must be >= 1", 5 + 4 * i)
    expected = t * h * w * c * 4
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise ClipFormatError(
            f"truncated payload: header declares T={t},H={h},W={w},C={c} "
            f"({expected} bytes) but only {payload} present",
            len(buf),
        )
    if payload > expected:
        raise ClipFormatError(f"{payload - expected} trailing bytes after payload", _HEADER.size + expected)
    px = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(t, h, w, c)
    bad = ~np.isfinite(px) | (px < 0.0) | (px > 1.0)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise ClipFormatError("pixel value outside [0, 1]", _HEADER.size + 4 * first)
    return px.astype(np.float32)


def write_clip(path: str | os.PathLike, clip: VideoClip | np.ndarray) -> None:
    pixels = clip.pixels if isinstance(clip, VideoClip) else clip
    Path(path).write_bytes(encode_clip(pixels))


def load_clip(path: str | os.PathLike, label: int | None = None, clip_id: str | None = None) -> VideoClip:
    """Read a clip file. ``clip_id`` defaults to the file stem."""
    path = Path(path)
    pixels = decode_clip(path.read_bytes())
    return VideoClip(pixels, label=label, clip_id=path.stem if clip_id is None else clip_id)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    label: int
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    generator_params: dict
    seed: int
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def to_dict(self) -> dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "generator_params": self.generator_params,
            "seed": self.seed,
        }

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.root = path.parent

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            entries = [ManifestEntry(**e) for e in raw["entries"]]
            man = cls(entries, raw["generator_params"], int(raw["seed"]), root=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        man.validate()
        return man

    def validate(self) -> None:
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate clip_id in manifest")
        for e in self.entries:
            if e.label not in (0, 1):
                raise DataError(f"unknown label {e.label!r} for clip {e.clip_id}")
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r} for clip {e.clip_id}")
            if not self.resolve(e).is_file():
                raise DataError(f"missing clip file {self.resolve(e)}")

    def load_pixels(self, entries: Iterable[ManifestEntry]) -> np.ndarray:
        """Stack the pixel tensors of ``entries``; never touches labels."""
        return np.stack([decode_clip(self.resolve(e).read_bytes()) for e in entries])


def dataset_digest(manifest_path: str | os.PathLike) -> str:
    """SHA-256 over the manifest file and every clip file it references."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    for e in raw["entries"]:
        h.update((manifest_path.parent / e["path"]).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorParams:
    """Synthesis parameters for the two-class blob video dataset.

    ``difficulty`` in [0, 1] interpolates the malignant-like class
    (irregular boundary, jittering motion) toward the benign-like one
    (smooth boundary, steady drift); at 1 the classes share one appearance
    model. ``class_ratio`` is benign clips per malignant clip.
    """

    T: int = 16
    H: int = 64
    W: int = 64
    C: int = 1
    patch_size: int = 8
    source_frames: int = 0
    class_ratio: float = 3.0
    difficulty: float = 0.0
    speckle: float = 0.15
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def validate(self) -> None:
        if min(self.T, self.H, self.W, self.C, self.patch_size) < 1:
            raise ConfigError("T, H, W, C and patch_size must be >= 1")
        if self.H % self.patch_size or self.W % self.patch_size:
            raise ConfigError(f"frame size {self.H}x{self.W} is not divisible by patch size {self.patch_size}")
        if self.source_frames and self.source_frames < self.T:
            raise ConfigError("source_frames must be 0 or >= T")
        if self.class_ratio <= 0:
            raise ConfigError("class_ratio must be > 0")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigError("difficulty must be in [0, 1]")
        if self.speckle < 0:
            raise ConfigError("speckle must be >= 0")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise ConfigError("split must be three non-negative fractions summing to 1")


def split_sizes(n: int, fractions: Iterable[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``fractions``."""
    raw = [n * f for f in fractions]
    sizes = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (sizes[i] - raw[i], i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permutation in which every class is spread evenly along the sequence.

    Each class is shuffled, then item ``r`` of a class with ``n_c`` members
    is keyed at ``(r + 0.5) / n_c``; sorting by key interleaves the classes
    so any contiguous window is stratified to within one item per class.
    """
    keys = np.empty(len(labels))
    tiebreak = np.empty(len(labels))
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        keys[idx] = (np.arange(len(idx)) + 0.5) / len(idx)
        tiebreak[idx] = c
    return np.lexsort((tiebreak, keys))


def sample_frames(frames: np.ndarray, T: int) -> np.ndarray:
    """Pick exactly ``T`` frames from a longer sequence at a uniform stride."""
    n = frames.shape[0]
    if n < T:
        raise ConfigError(f"cannot sample {T} frames from {n}")
    return frames[(np.arange(T) * n) // T]


def _lerp(a: float, b: float, w: float) -> float:
    return a + (b - a) * w


def render_clip(params: GeneratorParams, label: int, rng: np.random.Generator) -> np.ndarray:
    """Render one clip of shape ``(T, H, W, C)``."""
    S = params.source_frames or params.T
    H, W = params.H, params.W
    size = min(H, W)
    d = params.difficulty

    yy, xx = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")

    # tissue background: smooth random texture
    bg = np.full((H, W), rng.uniform(0.55, 0.7))
    for _ in range(4):
        by, bx = rng.uniform(0, H), rng.uniform(0, W)
        s = rng.uniform(0.15, 0.35) * size
        bg += rng.uniform(-0.12, 0.12) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * s * s))

    r0 = rng.uniform(0.17, 0.26) * size
    aspect = rng.uniform(0.7, 1.0)
    theta0 = rng.uniform(0, np.pi)
    lesion_level = rng.uniform(0.1, 0.25)

    # boundary harmonics: smooth class keeps low, weak ones
    if label == 0:
        ks = np.array([2, 3])
        amps = rng.uniform(0.0, 0.04, size=2)
    else:
        ks = rng.choice(np.arange(5, 10), size=3, replace=False)
        amps = rng.uniform(0.6, 1.0, size=3) * _lerp(0.2, 0.02, d)
    phases = rng.uniform(0, 2 * np.pi, size=len(ks))

    # motion: steady drift for both, per-frame jitter for class 1
    c0 = np.array([H, W]) / 2 + rng.uniform(-0.12, 0.12, size=2) * size
    v = rng.normal(size=2)
    v *= rng.uniform(0.0, 0.25) * size / S / max(np.linalg.norm(v), 1e-9)
    centers = c0 + np.arange(S)[:, None] * v
    if label == 1:
        jitter = _lerp(0.07, 0.0, d) * size
        centers = centers + rng.normal(scale=jitter, size=(S, 2))
        wobble = rng.normal(scale=_lerp(0.8, 0.0, d), size=(S, len(ks)))
    else:
        wobble = np.zeros((S, len(ks)))

    frames = np.empty((S, H, W), dtype=np.float64)
    for t in range(S):
        dy, dx = yy - centers[t, 0], xx - centers[t, 1]
        ry = dy * np.cos(theta0) - dx * np.sin(theta0)
        rx = dy * np.sin(theta0) + dx * np.cos(theta0)
        dist = np.hypot(ry / aspect, rx)
        phi = np.arctan2(ry, rx)
        wiggle = sum(a * np.sin(k * phi + p + w) for a, k, p, w in zip(amps, ks, phases, wobble[t]))
        radius = r0 * (1.0 + wiggle)
        inside = 1.0 / (1.0 + np.exp(-(radius - dist) / 0.75))
        frames[t] = bg * (1 - inside) + lesion_level * inside

    if params.speckle > 0:
        shape = 1.0 / params.speckle**2
        frames *= rng.gamma(shape, 1.0 / shape, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    frames = sample_frames(frames, params.T)
    out = np.repeat(frames[..., None], params.C, axis=-1)
    return out.astype(np.float32)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MVCC_THREADS", "1")))
    except ValueError:
        return 1


def generate_synthetic_dataset(
    n_clips: int,
    params: GeneratorParams,
    seed: int,
    out_dir: str | os.PathLike,
) -> Manifest:
    """Write ``n_clips`` synthetic clips plus ``manifest.json`` into ``out_dir``.

    Clip ``i`` draws from ``default_rng([seed, i])`` so the output does not
    depend on how many workers render in parallel.
    """
    if n_clips < 4:
        raise ConfigError("n_clips must be >= 4")
    params.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    n_malignant = round_half_up(n_clips / (1.0 + params.class_ratio))
    n_malignant = min(max(n_malignant, 1), n_clips - 1)
    top = np.random.default_rng(seed)
    labels = np.zeros(n_clips, dtype=np.int64)
    labels[top.permutation(n_clips)[:n_malignant]] = 1

    order = stratified_order(labels, top)
    splits = np.empty(n_clips, dtype=object)
    start = 0
    for name, size in zip(SPLITS, split_sizes(n_clips, params.split)):
        splits[order[start : start + size]] = name
        start += size

    def _one(i: int) -> ManifestEntry:
        clip_id = f"clip_{i:05d}"
        pixels = render_clip(params, int(labels[i]), np.random.default_rng([seed, i]))
        rel = f"clips/{clip_id}.mvcc"
        write_clip(out_dir / rel, pixels)
        return ManifestEntry(clip_id, rel, int(labels[i]), str(splits[i]))

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(_one, range(n_clips)))
    else:
        entries = [_one(i) for i in range(n_clips)]

    gp = asdict(params)
    gp["split"] = list(params.split)
    manifest = Manifest(entries, gp, seed, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    """Clip-level scale / horizontal flip / crop.

    ``crop_size`` of ``None`` crops back to the input frame size.
    """

    scale_range: tuple[float, float] = (1.0, 1.15)
    flip_prob: float = 0.5
    crop_size: tuple[int, int] | None = None

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        if self.crop_size is not None and min(self.crop_size) < 1:
            raise ConfigError("crop_size must be positive")


def augment_pixels(pixels: np.ndarray, cfg: AugmentationConfig, rng_state) -> np.ndarray:
    """Apply one random scale/flip/crop to every frame of a ``(T, H, W, C)`` array.

    Draw order from ``rng_state``: scale, flip, crop-y, crop-x.
    """
    cfg.validate()
    rng = np.random.default_rng(rng_state)
    T, H, W, C = pixels.shape
    ch, cw = cfg.crop_size if cfg.crop_size is not None else (H, W)
    if ch > H or cw > W:
        raise ConfigError(f"crop {ch}x{cw} larger than frame {H}x{W}")

    s = rng.uniform(*cfg.scale_range)
    flip = rng.random() < cfg.flip_prob
    sh, sw = round_half_up(H * s), round_half_up(W * s)
    if ch > sh or cw > sw:
        raise ConfigError(f"crop {ch}x{cw} larger than scaled frame {sh}x{sw}")
    oy = int(rng.integers(0, sh - ch + 1))
    ox = int(rng.integers(0, sw - cw + 1))

    out = pixels
    if (sh, sw) != (H, W):
        x = torch.from_numpy(np.ascontiguousarray(pixels)).permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(sh, sw), mode="bilinear", align_corners=False)
        out = x.permute(0, 2, 3, 1).numpy()
    if flip:
        out = out[:, :, ::-1, :]
    out = out[:, oy : oy + ch, ox : ox + cw, :]
    return np.clip(np.ascontiguousarray(out, dtype=np.float32), 0.0, 1.0)


def augment(clip: VideoClip, cfg: AugmentationConfig, rng_state) -> VideoClip:
    return VideoClip(augment_pixels(clip.pixels, cfg, rng_state), label=clip.label, clip_id=clip.clip_id)
