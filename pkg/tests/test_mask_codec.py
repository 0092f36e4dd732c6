import struct

import numpy as np
import pytest

from splatseg.errors import FormatError
from splatseg.mask_codec import (MASK_MAGIC, MaskSet, decode, encode,
                                 load_manifest, load_maskset, pack_mask_bits,
                                 sample_masks, save_maskset, ManifestEntry,
                                 write_manifest)


class TestPacking:
    def test_all_ones_two_masks(self):
        masks = np.ones((2, 2, 4), dtype=np.uint8)  # M=2, H=2, W=4 -> 16 bits
        assert pack_mask_bits(masks) == b"\xff\xff"

    def test_msb_first_bit_order(self):
        mask = np.zeros((1, 1, 8), dtype=np.uint8)
        mask[0, 0, 0] = 1
        assert pack_mask_bits(mask) == b"\x80"

    def test_mask_major_row_major_order(self):
        # second mask, second row, first column -> bit index 1*6 + 1*3 + 0 = 9
        masks = np.zeros((2, 2, 3), dtype=np.uint8)
        masks[1, 1, 0] = 1
        packed = pack_mask_bits(masks)
        assert len(packed) == 2  # ceil(12 / 8)
        assert packed == bytes([0x00, 0x40])


class TestRoundTrip:
    def test_fuzzed_round_trips(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            m = int(rng.integers(1, 6))
            h = int(rng.integers(1, 24))
            w = int(rng.integers(1, 24))
            masks = (rng.random((m, h, w)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
            ms = decode(encode(masks, f"view{m}", rng.uniform(0, 1)))
            np.testing.assert_array_equal(ms.to_tensor(), masks)
            assert (ms.count, ms.height, ms.width) == (m, h, w)

    def test_metadata_round_trip(self):
        masks = np.eye(5, dtype=np.uint8).reshape(1, 5, 5)
        ms = decode(encode(masks, "camera_07", 0.25))
        assert ms.view_id == "camera_07"
        assert ms.t == pytest.approx(0.25)

    def test_file_round_trip(self, tmp_path):
        masks = (np.arange(60).reshape(3, 4, 5) % 3 == 0).astype(np.uint8)
        ms = MaskSet.from_tensor(masks, "v", 0.5)
        path = tmp_path / "m.sadgmask"
        save_maskset(ms, path)
        np.testing.assert_array_equal(load_maskset(path).to_tensor(), masks)

    def test_deterministic_encoding(self):
        rng = np.random.default_rng(0)
        masks = (rng.random((4, 16, 16)) < 0.3).astype(np.uint8)
        assert encode(masks, "v", 0.1) == encode(masks.copy(), "v", 0.1)


class TestErrors:
    def test_bad_magic(self):
        data = bytearray(encode(np.ones((1, 2, 2), dtype=np.uint8), "v", 0.0))
        data[:8] = b"XXXXXXXX"
        with pytest.raises(FormatError):
            decode(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(encode(np.ones((1, 2, 2), dtype=np.uint8), "v", 0.0))
        struct.pack_into("<I", data, len(MASK_MAGIC), 2)
        with pytest.raises(FormatError):
            decode(bytes(data))

    def test_truncated_payload(self):
        data = encode(np.ones((2, 8, 8), dtype=np.uint8), "v", 0.0)
        with pytest.raises(FormatError):
            decode(data[:-1])

    def test_zero_dims_rejected_on_encode(self):
        with pytest.raises(ValueError):
            encode(np.ones((0, 4, 4), dtype=np.uint8), "v", 0.0)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            encode(np.full((1, 2, 2), 3, dtype=np.uint8), "v", 0.0)


class TestSampling:
    def test_clamped_to_mask_count(self):
        masks = np.ones((10, 2, 2), dtype=np.uint8)
        ms = MaskSet.from_tensor(masks, "v", 0.0)
        idx = sample_masks(ms, 25, 0)
        assert sorted(idx) == list(range(10))

    def test_deterministic_for_seed(self):
        ms = MaskSet.from_tensor(np.ones((40, 2, 2), dtype=np.uint8), "v", 0.0)
        a = sample_masks(ms, 8, 123)
        b = sample_masks(ms, 8, 123)
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 8

    def test_m_prime_validation(self):
        ms = MaskSet.from_tensor(np.ones((4, 2, 2), dtype=np.uint8), "v", 0.0)
        with pytest.raises(ValueError):
            sample_masks(ms, 0, 0)


class TestCompression:
    def test_sparse_sets_compress_beyond_50x(self):
        # regime: ~100 masks at 1352 x 1014, each covering a small blob
        rng = np.random.default_rng(5)
        m, w, h = 100, 1352, 1014
        masks = np.zeros((m, h, w), dtype=np.uint8)
        for i in range(m):
            cu, cv = rng.integers(60, w - 60), rng.integers(60, h - 60)
            ru, rv = rng.integers(10, 55), rng.integers(10, 55)
            masks[i, max(0, cv - rv):cv + rv, max(0, cu - ru):cu + ru] = 1
        blob = encode(masks, "coffee", 0.0)
        dense_bytes = m * w * h  # one byte per pixel
        assert len(blob) * 50 <= dense_bytes
        np.testing.assert_array_equal(decode(blob).to_tensor(), masks)


def test_manifest_round_trip(tmp_path):
    entries = []
    for i in range(3):
        ms = MaskSet.from_tensor(np.ones((2, 4, 4), dtype=np.uint8), f"v{i}", i / 3)
        p = tmp_path / f"m{i}.sadgmask"
        save_maskset(ms, p)
        entries.append(ManifestEntry(view_id=f"v{i}", t=i / 3, path=p))
    manifest = tmp_path / "manifest.json"
    write_manifest(entries, manifest)
    loaded = load_manifest(manifest)
    assert [e.view_id for e in loaded] == ["v0", "v1", "v2"]
    assert all(e.path.exists() for e in loaded)
