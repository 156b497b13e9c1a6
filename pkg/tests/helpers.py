import dataclasses

from mvcc.data import Manifest
from mvcc.model import DecoderConfig, EncoderConfig


def tiny_model_cfgs(T=4, H=16, W=16):
    enc = EncoderConfig(patch_size=8, token_dim=16, depth=1, heads=2, T=T, H=H, W=W)
    return enc, DecoderConfig(token_dim=16, depth=1, heads=2)


def relabel(manifest: Manifest, labels) -> Manifest:
    entries = [dataclasses.replace(e, label=int(y)) for e, y in zip(manifest.entries, labels)]
    return dataclasses.replace(manifest, entries=entries)


class PoisonedEntry:
    """A manifest entry whose label cannot be read."""

    def __init__(self, entry):
        self.clip_id, self.path, self.split = entry.clip_id, entry.path, entry.split

    @property
    def label(self):
        raise AssertionError("label was read")
