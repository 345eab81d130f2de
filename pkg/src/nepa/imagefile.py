"""Minimal PNG and binary PPM (P6) codecs.

Only what the folder loader and dataset export need: 8-bit grayscale or RGB,
no interlacing, no palettes. The PNG reader handles all five scanline
filters; the writer emits filter 0 rows. Everything is deterministic, so
identical arrays produce byte-identical files.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DatasetError

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path, image: np.ndarray) -> None:
    """Write HWC uint8 (or [0,1] float) as an 8-bit PNG; C may be 1 or 3."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise DatasetError(f"write_png: {c} channels unsupported")
    color_type = 0 if c == 1 else 2
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    raw = b"".join(b"\x00" + arr[y].tobytes() for y in range(h))
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_chunk(b"IHDR", ihdr))
        f.write(_chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(_chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


_PAETH_VEC = np.vectorize(_paeth, otypes=[np.int32])


def _unfilter(raw: bytes, h: int, w: int, c: int) -> np.ndarray:
    stride = w * c
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        row = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += 1 + stride
        prev = out[y - 1].astype(np.int32) if y > 0 else np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            cur = row
        elif ftype == 1:  # sub
            cur = row.copy()
            for x in range(c, stride):
                cur[x] = (cur[x] + cur[x - c]) & 0xFF
        elif ftype == 2:  # up
            cur = (row + prev) & 0xFF
        elif ftype == 3:  # average
            cur = row.copy()
            for x in range(stride):
                left = cur[x - c] if x >= c else 0
                cur[x] = (cur[x] + (left + prev[x]) // 2) & 0xFF
        elif ftype == 4:  # paeth
            cur = row.copy()
            for x in range(stride):
                left = cur[x - c] if x >= c else 0
                ul = prev[x - c] if x >= c else 0
                cur[x] = (cur[x] + _paeth(left, prev[x], ul)) & 0xFF
        else:
            raise DatasetError(f"png: unknown scanline filter {ftype}")
        out[y] = cur.astype(np.uint8)
    return out.reshape(h, w, c)


def read_png(path) -> np.ndarray:
    """Read an 8-bit grayscale/RGB PNG into HWC float32 in [0,1]."""
    data = Path(path).read_bytes()
    if data[:8] != _PNG_SIG:
        raise DatasetError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = b""
    while pos + 8 <= len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if len(payload) != length:
            raise DatasetError(f"{path}: truncated chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None or not idat:
        raise DatasetError(f"{path}: missing IHDR or IDAT")
    w, h, depth, color_type, comp, filt, interlace = ihdr
    if depth != 8 or comp != 0 or filt != 0 or interlace != 0:
        raise DatasetError(f"{path}: unsupported PNG variant (depth {depth})")
    if color_type == 0:
        c = 1
    elif color_type == 2:
        c = 3
    else:
        raise DatasetError(f"{path}: unsupported color type {color_type}")
    try:
        raw = zlib.decompress(idat)
    except zlib.error as e:
        raise DatasetError(f"{path}: bad PNG stream ({e})") from e
    if len(raw) != h * (1 + w * c):
        raise DatasetError(f"{path}: wrong decompressed size")
    return _unfilter(raw, h, w, c).astype(np.float32) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write HWC uint8 (or [0,1] float) RGB as binary PPM."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DatasetError("write_ppm: expected HWC RGB")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary PPM (P6, maxval 255) into HWC float32 in [0,1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise DatasetError(f"{path}: not a P6 PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise DatasetError(f"{path}: bad PPM header") from e
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise DatasetError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


def read_image(path) -> np.ndarray:
    """Decode by extension; returns HWC float32 in [0,1]."""
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return read_png(path)
    if suffix in (".ppm", ".pnm"):
        return read_ppm(path)
    raise DatasetError(f"{path}: unsupported image format {suffix!r}")
