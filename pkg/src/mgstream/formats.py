"""Binary file formats and small I/O helpers.

All multi-byte values are little-endian. Every format starts with an 8-byte
magic: a 7-character tag padded with one NUL byte.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def magic_bytes(tag: str) -> bytes:
    raw = tag.encode("ascii")
    assert len(raw) == 7
    return raw + b"\x00"


def check_magic(buf: bytes, tag: str) -> None:
    if len(buf) < 8:
        raise FormatError(f"file too short for {tag} magic", len(buf))
    if buf[:8] != magic_bytes(tag):
        raise FormatError(f"bad magic, expected {tag}", 0)


def atomic_write(path, data: bytes) -> None:
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# varints


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise FormatError("truncated varint", pos)
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise FormatError("varint too long", pos)


def encode_index_list(indices) -> bytes:
    """Strictly ascending ints as varint gaps (first value stored as-is)."""
    out = bytearray()
    prev = -1
    for v in np.asarray(indices, dtype=np.int64).tolist():
        if v <= prev:
            raise ValueError("index list must be strictly ascending")
        out += encode_varint(v - prev - 1)
        prev = v
    return bytes(out)


def decode_index_list(buf: bytes, count: int, pos: int = 0) -> tuple[np.ndarray, int]:
    out = np.empty(count, dtype=np.int64)
    prev = -1
    for i in range(count):
        gap, pos = decode_varint(buf, pos)
        prev = prev + gap + 1
        out[i] = prev
    return out, pos


# --------------------------------------------------------------------------
# raw float images (MGSIMG1) and flows (MGSFLO1)


def image_to_bytes(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    planar = np.ascontiguousarray(np.moveaxis(img, 2, 0)).astype("<f4")
    return magic_bytes("MGSIMG1") + struct.pack("<III", w, h, c) + planar.tobytes()


def image_from_bytes(buf: bytes) -> np.ndarray:
    check_magic(buf, "MGSIMG1")
    if len(buf) < 20:
        raise FormatError("truncated MGSIMG1 header", len(buf))
    w, h, c = struct.unpack_from("<III", buf, 8)
    need = 20 + 4 * w * h * c
    if len(buf) != need:
        raise FormatError(f"MGSIMG1 payload length {len(buf) - 20} != {need - 20}", min(len(buf), need))
    planar = np.frombuffer(buf, dtype="<f4", offset=20).reshape(c, h, w)
    return np.moveaxis(planar, 0, 2).astype(np.float64)


def save_image_raw(img, path) -> None:
    atomic_write(path, image_to_bytes(img))


def load_image_raw(path) -> np.ndarray:
    return image_from_bytes(Path(path).read_bytes())


def flow_to_bytes(flow) -> bytes:
    flow = np.asarray(flow)
    h, w, _ = flow.shape
    return (magic_bytes("MGSFLO1") + struct.pack("<II", w, h)
            + np.ascontiguousarray(flow, dtype="<f4").tobytes())


def flow_from_bytes(buf: bytes) -> np.ndarray:
    check_magic(buf, "MGSFLO1")
    if len(buf) < 16:
        raise FormatError("truncated MGSFLO1 header", len(buf))
    w, h = struct.unpack_from("<II", buf, 8)
    need = w * h * 2 * 4
    if len(buf) - 16 != need:
        raise FormatError(f"MGSFLO1 payload length {len(buf) - 16} != {need}", min(len(buf), 16 + need))
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w, 2).copy()


# --------------------------------------------------------------------------
# PNG


def save_png(img, path) -> None:
    img = np.asarray(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if img.dtype == bool:
        Image.fromarray(img).convert("1").save(path)
        return
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "1":
            return np.asarray(im, dtype=bool)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
