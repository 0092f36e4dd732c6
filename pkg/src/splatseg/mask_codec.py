"""Bit-exact codec for multi-object binary mask sets.

Container layout (little-endian):
    magic "SADGMSK1" | u32 version=1 | u32 M | u32 W | u32 H
    | u16 view-id length | UTF-8 view id | f32 t
    | u32 deflate-payload length | deflated bit payload

The bit payload packs the M x H x W binary tensor mask-major, row-major
(v outer, u inner), MSB-first within each byte; trailing pad bits are zero.
The deflate stage is what buys the large size reduction on sparse masks
(plain packing alone caps out at 8x versus a byte-per-pixel dump).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MASK_MAGIC = b"SADGMSK1"
MASK_VERSION = 1
MASK_FILE_EXT = ".sadgmask"


@dataclass
class MaskSet:
    """M binary masks for one (view, timestamp), packed as a bit array."""

    count: int
    width: int
    height: int
    bits: bytes  # packed payload, ceil(M*W*H/8) bytes
    view_id: str
    t: float

    def to_tensor(self) -> np.ndarray:
        """Unpack to the (M, H, W) uint8 binary tensor."""
        return unpack_mask_bits(self.bits, self.count, self.width, self.height)

    @staticmethod
    def from_tensor(masks: np.ndarray, view_id: str, t: float) -> "MaskSet":
        masks = _check_tensor(masks)
        m, h, w = masks.shape
        return MaskSet(count=m, width=w, height=h, bits=pack_mask_bits(masks),
                       view_id=view_id, t=float(t))


def _check_tensor(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValueError(f"mask tensor must be (M, H, W), got shape {masks.shape}")
    if 0 in masks.shape:
        raise ValueError(f"mask tensor has a zero-sized dimension: {masks.shape}")
    arr = masks.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask tensor values must be 0 or 1")
    return arr


def pack_mask_bits(masks: np.ndarray) -> bytes:
    """Pack an (M, H, W) binary tensor MSB-first, mask-major then row-major."""
    arr = _check_tensor(masks)
    return np.packbits(arr.reshape(-1), bitorder="big").tobytes()


def unpack_mask_bits(bits: bytes, m: int, w: int, h: int) -> np.ndarray:
    total = m * w * h
    buf = np.frombuffer(bits, dtype=np.uint8)
    if len(buf) != (total + 7) // 8:
        raise FormatError(f"bit payload has {len(buf)} bytes, expected {(total + 7) // 8}")
    return np.unpackbits(buf, count=total, bitorder="big").reshape(m, h, w)


def encode(masks: np.ndarray, view_id: str, t: float) -> bytes:
    """Serialize an (M, H, W) binary tensor into the container byte stream."""
    arr = _check_tensor(masks)
    m, h, w = arr.shape
    vid = view_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise ValueError("view_id too long")
    payload = zlib.compress(pack_mask_bits(arr), level=6)
    head = struct.pack("<4I", MASK_VERSION, m, w, h)
    return (MASK_MAGIC + head + struct.pack("<H", len(vid)) + vid
            + struct.pack("<f", float(t)) + struct.pack("<I", len(payload)) + payload)


def encode_maskset(ms: MaskSet) -> bytes:
    return encode(ms.to_tensor(), ms.view_id, ms.t)


def decode(data: bytes) -> MaskSet:
    """Parse a container byte stream back into a MaskSet (exact round-trip)."""
    if len(data) < len(MASK_MAGIC) + 16:
        raise FormatError("mask container truncated before the fixed header")
    if data[: len(MASK_MAGIC)] != MASK_MAGIC:
        raise FormatError(f"bad mask magic {data[:8]!r}, expected {MASK_MAGIC!r}")
    off = len(MASK_MAGIC)
    version, m, w, h = struct.unpack_from("<4I", data, off)
    off += 16
    if version != MASK_VERSION:
        raise FormatError(f"unsupported mask container version {version}")
    if m == 0 or w == 0 or h == 0:
        raise FormatError(f"mask container declares zero-sized dims M={m} W={w} H={h}")
    if len(data) < off + 2:
        raise FormatError("mask container truncated in the view-id field")
    (vid_len,) = struct.unpack_from("<H", data, off)
    off += 2
    if len(data) < off + vid_len + 8:
        raise FormatError("mask container truncated in the view-id / time fields")
    view_id = data[off : off + vid_len].decode("utf-8")
    off += vid_len
    (t,) = struct.unpack_from("<f", data, off)
    off += 4
    (payload_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + payload_len:
        raise FormatError(
            f"mask payload truncated: {len(data) - off} bytes present, {payload_len} declared"
        )
    try:
        bits = zlib.decompress(data[off : off + payload_len])
    except zlib.error as e:
        raise FormatError(f"mask payload is not a valid deflate stream: {e}") from e
    expected = (m * w * h + 7) // 8
    if len(bits) != expected:
        raise FormatError(f"unpacked payload has {len(bits)} bytes, expected {expected}")
    rem = (m * w * h) % 8
    if rem and bits[-1] & ((1 << (8 - rem)) - 1):
        raise FormatError("nonzero padding bits in the final payload byte")
    return MaskSet(count=m, width=w, height=h, bits=bits, view_id=view_id, t=float(t))


def save_maskset(ms: MaskSet, path) -> None:
    Path(path).write_bytes(encode_maskset(ms))


def load_maskset(path) -> MaskSet:
    return decode(Path(path).read_bytes())


def sample_masks(ms: MaskSet | int, m_prime: int, rng_seed) -> np.ndarray:
    """min(m_prime, M) distinct mask indices, uniform without replacement.

    rng_seed may be an int seed or a numpy Generator; the draw is deterministic
    for a fixed seed.
    """
    if m_prime < 1:
        raise ValueError(f"m_prime must be >= 1, got {m_prime}")
    m = ms if isinstance(ms, int) else ms.count
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.choice(m, size=min(m_prime, m), replace=False)


# ---------------------------------------------------------------------------
# dataset manifest: JSON list of {view_id, t, path} with paths relative to the
# manifest file


@dataclass
class ManifestEntry:
    view_id: str
    t: float
    path: Path


def write_manifest(entries, path) -> None:
    path = Path(path)
    rows = [
        {"view_id": e.view_id, "t": e.t, "path": str(Path(e.path).relative_to(path.parent))}
        for e in entries
    ]
    path.write_text(json.dumps(rows, indent=2))


def load_manifest(path) -> list:
    path = Path(path)
    rows = json.loads(path.read_text())
    return [ManifestEntry(view_id=str(r["view_id"]), t=float(r["t"]), path=path.parent / r["path"])
            for r in rows]
