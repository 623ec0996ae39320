"""Float32 tensor validation and the RTEN binary container.

All tensors in the pipeline are C-contiguous float32 arrays of rank 1..4
with strictly positive extents and finite values. The RTEN container stores
an ordered set of named tensors bit-exactly:

    magic "RTEN" | version u32 LE (= 1) | count u32 LE
    per entry: name_len u8 | name bytes | dtype u8 (0x01 = f32) | rank u8 |
               rank x extent u32 LE | numel x f32 LE
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RTEN"
VERSION = 1
DTYPE_F32 = 0x01
MAX_RANK = 4
MAX_NAME_BYTES = 255

_HEADER = struct.Struct("<4sII")


class TensorFormatError(ValueError):
    """Malformed RTEN bytes, or a tensor violating container limits."""


def check_tensor(values, name: str = "tensor") -> np.ndarray:
    """Validate and return a C-contiguous float32 tensor of rank 1..4."""
    arr = np.asarray(values)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise TensorFormatError(f"{name}: rank {arr.ndim} outside 1..{MAX_RANK}")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"{name}: zero extent in shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise TensorFormatError(f"{name}: non-finite values")
    return arr


def dumps(entries) -> bytes:
    """Serialize named tensors; `entries` is a mapping or iterable of (name, tensor)."""
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    chunks = [_HEADER.pack(MAGIC, VERSION, len(items))]
    seen: set[bytes] = set()
    for name, values in items:
        raw = name.encode("utf-8") if isinstance(name, str) else bytes(name)
        if not 1 <= len(raw) <= MAX_NAME_BYTES:
            raise TensorFormatError(f"name {name!r}: {len(raw)} bytes outside 1..{MAX_NAME_BYTES}")
        if raw in seen:
            raise TensorFormatError(f"duplicate name {name!r}")
        seen.add(raw)
        arr = check_tensor(values, name=str(name))
        chunks.append(struct.pack(f"<B{len(raw)}sBB", len(raw), raw, DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def loads(data: bytes) -> dict[str, np.ndarray]:
    """Parse RTEN bytes into an ordered name -> float32 tensor dict."""
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TensorFormatError(f"truncated {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise TensorFormatError("bad magic")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")

    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = take(1, f"entry {i} name length")
        if name_len == 0:
            raise TensorFormatError(f"entry {i}: empty name")
        try:
            name = bytes(take(name_len, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFormatError(f"entry {i}: name is not valid UTF-8") from exc
        dtype, rank = take(2, f"entry {i} ({name}) descriptor")
        if dtype != DTYPE_F32:
            raise TensorFormatError(f"entry {name!r}: unknown dtype code {dtype:#04x}")
        if not 1 <= rank <= MAX_RANK:
            raise TensorFormatError(f"entry {name!r}: rank {rank} outside 1..{MAX_RANK}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"entry {name!r} shape"))
        if any(d < 1 for d in shape):
            raise TensorFormatError(f"entry {name!r}: zero extent in shape {shape}")
        numel = 1
        for d in shape:
            numel *= d
        payload = take(4 * numel, f"entry {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise TensorFormatError(f"entry {name!r}: non-finite values")
        if name in entries:
            raise TensorFormatError(f"duplicate name {name!r}")
        entries[name] = arr
    if pos != len(view):
        raise TensorFormatError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def write_rten(path, entries) -> None:
    Path(path).write_bytes(dumps(entries))


def read_rten(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
