"""Binary PPM (P6) and PGM (P5) image I/O, 8-bit, channel-first arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    """Malformed PPM/PGM data."""


def ppm_bytes(image) -> bytes:
    """Encode a (3, H, W) uint8 image as binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise NetpbmError(f"expected (3, H, W) uint8 image, got {img.dtype} {img.shape}")
    _, h, w = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes()


def pgm_bytes(image) -> bytes:
    """Encode a (H, W) uint8 (or bool, mapped to 0/255) image as binary PGM."""
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.ndim != 2 or img.dtype != np.uint8:
        raise NetpbmError(f"expected (H, W) uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def _parse_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise NetpbmError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise NetpbmError("truncated header")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            pos = data.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise NetpbmError(f"bad dimensions {w}x{h}")
    return w, h, pos


def parse_ppm(data: bytes) -> np.ndarray:
    """Decode binary PPM bytes into a (3, H, W) uint8 array."""
    w, h, pos = _parse_header(data, b"P6")
    if len(data) - pos != 3 * w * h:
        raise NetpbmError(f"payload of {len(data) - pos} bytes, expected {3 * w * h}")
    flat = np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=pos)
    return flat.reshape(h, w, 3).transpose(2, 0, 1).copy()


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode binary PGM bytes into a (H, W) uint8 array."""
    w, h, pos = _parse_header(data, b"P5")
    if len(data) - pos != w * h:
        raise NetpbmError(f"payload of {len(data) - pos} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def write_ppm(path, image) -> None:
    Path(path).write_bytes(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def write_pgm(path, image) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())
