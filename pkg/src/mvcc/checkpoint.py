"""Named-tensor checkpoint archive.

Layout::

    b"MVCCCKPT" | header_len:u64 LE | header JSON (UTF-8) | float32 LE buffers

The header maps each tensor name to shape, dtype, offset and byte length
(offsets relative to the start of the buffer section) and carries the
model configs under ``"configs"``. Serialization is canonical (sorted JSON
keys, tensor order preserved), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"MVCCCKPT"


def encode_checkpoint(tensors: dict[str, torch.Tensor], configs: dict) -> bytes:
    entries, buffers, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({"configs": configs, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(buffers)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<Q", buf, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    data = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = data + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise CheckpointError("truncated checkpoint", [e["name"]])
        arr = np.frombuffer(buf, dtype="<f4", count=e["nbytes"] // 4, offset=lo).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["configs"]


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], configs: dict) -> str:
    """Write the archive and return its SHA-256 digest."""
    buf = encode_checkpoint(tensors, configs)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def load_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``tensors`` (names relative to ``prefix``) into ``module``.

    Every parameter under ``prefix`` must be present with a matching shape;
    otherwise nothing is loaded and the offending names are listed.
    """
    state = module.state_dict()
    wanted = {k[len(prefix) :]: k for k in state if k.startswith(prefix)}
    missing = sorted(n for n in wanted if n not in tensors)
    unexpected = sorted(n for n in tensors if n not in wanted)
    mismatched = sorted(n for n in wanted if n in tensors and tuple(tensors[n].shape) != tuple(state[wanted[n]].shape))
    bad = [f"missing:{n}" for n in missing] + [f"unexpected:{n}" for n in unexpected] + [f"shape:{n}" for n in mismatched]
    if bad:
        raise CheckpointError("checkpoint does not match model architecture", bad)
    with torch.no_grad():
        for n, full in wanted.items():
            state[full].copy_(tensors[n].to(state[full].dtype))
