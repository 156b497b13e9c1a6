import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcc.data import (
    AugmentationConfig,
    GeneratorParams,
    Manifest,
    VideoClip,
    augment,
    dataset_digest,
    decode_clip,
    encode_clip,
    generate_synthetic_dataset,
    load_clip,
    sample_frames,
    split_sizes,
    stratified_order,
    write_clip,
)
from mvcc.errors import ClipFormatError, ConfigError, DataError


def random_clip(rng, shape=(3, 8, 8, 1), label=1):
    return VideoClip(rng.random(shape, dtype=np.float32), label=label, clip_id="c")


class TestClipFormat:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        clip = random_clip(rng, (5, 16, 8, 2))
        write_clip(tmp_path / "a.mvcc", clip)
        back = load_clip(tmp_path / "a.mvcc", label=clip.label)
        assert back.pixels.tobytes() == clip.pixels.tobytes()
        assert back.clip_id == "a"

    def test_header_layout(self):
        buf = encode_clip(np.zeros((16, 64, 64, 1), dtype=np.float32))
        assert buf[:4] == b"MVCC"
        assert buf[4] == 1
        assert struct.unpack("<4I", buf[5:21]) == (16, 64, 64, 1)
        assert len(buf) == 21 + 16 * 64 * 64 * 4

    def test_all_zeros_clip(self, tmp_path):
        write_clip(tmp_path / "z.mvcc", VideoClip(np.zeros((2, 8, 8, 1)), label=0))
        back = load_clip(tmp_path / "z.mvcc", label=0)
        assert not back.pixels.any()
        assert back.label == 0

    def test_short_payload_reports_offset(self):
        buf = encode_clip(np.zeros((16, 64, 64, 1), dtype=np.float32))[:-100]
        with pytest.raises(ClipFormatError) as err:
            decode_clip(buf)
        assert err.value.offset == len(buf)

    def test_bad_magic(self):
        buf = b"XXXX" + encode_clip(np.zeros((1, 1, 1, 1)))[4:]
        with pytest.raises(ClipFormatError) as err:
            decode_clip(buf)
        assert err.value.offset == 0

    def test_truncated_header(self):
        with pytest.raises(ClipFormatError):
            decode_clip(b"MVCC\x01\x00")

    def test_out_of_range_value(self):
        buf = bytearray(encode_clip(np.zeros((1, 2, 2, 1))))
        buf[21 + 8 : 21 + 12] = struct.pack("<f", 2.0)
        with pytest.raises(ClipFormatError) as err:
            decode_clip(bytes(buf))
        assert err.value.offset == 29

    def test_clip_rejects_values_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            VideoClip(np.full((1, 2, 2, 1), 1.5))

    def test_patch_divisibility(self):
        with pytest.raises(ConfigError):
            VideoClip(np.zeros((1, 10, 8, 1))).check_patch_size(4)


class TestSplits:
    def test_split_sizes_exact(self):
        assert split_sizes(100, (0.7, 0.1, 0.2)) == [70, 10, 20]
        assert sum(split_sizes(37, (0.7, 0.1, 0.2))) == 37

    @given(st.lists(st.integers(0, 1), min_size=4, max_size=80), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_stratified_order_windows(self, labels, seed):
        labels = np.array(labels)
        order = stratified_order(labels, np.random.default_rng(seed))
        assert sorted(order.tolist()) == list(range(len(labels)))
        frac = labels.mean()
        for w in (4, 10):
            for lo in range(0, len(labels) - w + 1, w):
                got = labels[order[lo : lo + w]].sum()
                assert abs(got - frac * w) <= 2

    def test_sample_frames_uniform_stride(self):
        frames = np.arange(32)[:, None]
        assert sample_frames(frames, 8)[:, 0].tolist() == [0, 4, 8, 12, 16, 20, 24, 28]
        assert sample_frames(frames, 32)[:, 0].tolist() == list(range(32))


class TestGenerator:
    def test_class_ratio_3_to_1(self, tmp_path):
        man = generate_synthetic_dataset(8, GeneratorParams(T=4, H=16, W=16), 7, tmp_path)
        labels = [e.label for e in man.entries]
        assert len(labels) == 8
        assert labels.count(0) == 6 and labels.count(1) == 2

    def test_deterministic_bytes(self, tmp_path):
        p = GeneratorParams(T=4, H=16, W=16)
        generate_synthetic_dataset(8, p, 7, tmp_path / "a")
        generate_synthetic_dataset(8, p, 7, tmp_path / "b")
        for f in sorted((tmp_path / "a" / "clips").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "clips" / f.name).read_bytes()
        assert dataset_digest(tmp_path / "a" / "manifest.json") == dataset_digest(tmp_path / "b" / "manifest.json")

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        p = GeneratorParams(T=4, H=16, W=16)
        generate_synthetic_dataset(6, p, 3, tmp_path / "serial")
        monkeypatch.setenv("MVCC_THREADS", "3")
        generate_synthetic_dataset(6, p, 3, tmp_path / "par")
        assert dataset_digest(tmp_path / "serial" / "manifest.json") == dataset_digest(tmp_path / "par" / "manifest.json")

    def test_split_sizes_100(self, tmp_path):
        p = GeneratorParams(T=2, H=8, W=8, split=(0.7, 0.1, 0.2))
        man = generate_synthetic_dataset(100, p, 1, tmp_path)
        sizes = {s: len(man.split(s)) for s in ("train", "val", "test")}
        assert sizes == {"train": 70, "val": 10, "test": 20}
        # stratified: each split holds ~25% malignant
        for s, n in sizes.items():
            assert abs(sum(e.label for e in man.split(s)) - n / 4) <= 1

    def test_manifest_schema(self, tiny_dataset):
        raw = json.loads((tiny_dataset.root / "manifest.json").read_text())
        assert set(raw) == {"entries", "generator_params", "seed"}
        assert set(raw["entries"][0]) == {"clip_id", "path", "label", "split"}
        reloaded = Manifest.load(tiny_dataset.root / "manifest.json")
        assert reloaded.entries == tiny_dataset.entries

    def test_values_in_unit_range(self, tiny_dataset):
        px = tiny_dataset.load_pixels(tiny_dataset.entries)
        assert px.shape == (24, 4, 16, 16, 1)
        assert px.min() >= 0 and px.max() <= 1

    def test_indivisible_dims_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_synthetic_dataset(8, GeneratorParams(H=30), 0, tmp_path)

    def test_too_few_clips(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_synthetic_dataset(3, GeneratorParams(T=2, H=8, W=8), 0, tmp_path)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_synthetic_dataset(4, GeneratorParams(T=2, H=8, W=8), 0, blocker / "sub")

    def test_manifest_unknown_label(self, tiny_dataset, tmp_path):
        raw = json.loads((tiny_dataset.root / "manifest.json").read_text())
        raw["entries"][0]["label"] = 7
        bad = tiny_dataset.root / "bad_manifest.json"
        bad.write_text(json.dumps(raw))
        with pytest.raises(DataError):
            Manifest.load(bad)

    def test_difficulty_one_removes_class_cues(self, tmp_path):
        # at difficulty 1 the malignant class loses its frame-to-frame jitter
        p = GeneratorParams(T=8, H=32, W=32, difficulty=1.0, speckle=0.0)
        from mvcc.data import render_clip

        mal = render_clip(p, 1, np.random.default_rng(0))
        diffs = np.abs(np.diff(mal, axis=0)).mean()
        easy = render_clip(GeneratorParams(T=8, H=32, W=32, speckle=0.0), 1, np.random.default_rng(0))
        assert diffs < np.abs(np.diff(easy, axis=0)).mean()


class TestAugment:
    def test_identity(self, rng):
        clip = random_clip(rng, (3, 8, 8, 1))
        out = augment(clip, AugmentationConfig(scale_range=(1, 1), flip_prob=0.0, crop_size=(8, 8)), 0)
        np.testing.assert_array_equal(out.pixels, clip.pixels)

    def test_flip_is_involution(self, rng):
        clip = random_clip(rng, (3, 8, 8, 1))
        cfg = AugmentationConfig(scale_range=(1, 1), flip_prob=1.0)
        once = augment(clip, cfg, 0)
        assert not np.array_equal(once.pixels, clip.pixels)
        np.testing.assert_array_equal(augment(once, cfg, 1).pixels, clip.pixels)

    def test_deterministic(self, rng):
        clip = random_clip(rng, (3, 16, 16, 1))
        cfg = AugmentationConfig(scale_range=(1.0, 1.5), flip_prob=0.5, crop_size=(16, 16))
        np.testing.assert_array_equal(augment(clip, cfg, 42).pixels, augment(clip, cfg, 42).pixels)

    def test_shape_label_range(self, rng):
        clip = random_clip(rng, (4, 16, 16, 2), label=1)
        out = augment(clip, AugmentationConfig(scale_range=(1.1, 1.4), crop_size=(12, 8)), 3)
        assert out.shape == (4, 12, 8, 2)
        assert out.label == 1
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1

    def test_temporal_consistency(self, rng):
        frame = rng.random((1, 16, 16, 1), dtype=np.float32)
        clip = VideoClip(np.repeat(frame, 6, axis=0), label=0)
        out = augment(clip, AugmentationConfig(scale_range=(1.0, 1.5), flip_prob=0.5), 11).pixels
        for t in range(1, 6):
            np.testing.assert_array_equal(out[t], out[0])

    def test_crop_too_large(self, rng):
        clip = random_clip(rng, (2, 8, 8, 1))
        with pytest.raises(ConfigError):
            augment(clip, AugmentationConfig(scale_range=(1, 1), crop_size=(9, 8)), 0)

    def test_invalid_scale_range(self, rng):
        with pytest.raises(ConfigError):
            augment(random_clip(rng), AugmentationConfig(scale_range=(1.2, 1.0)), 0)
