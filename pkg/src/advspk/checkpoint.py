"""Project-wide checkpoint file format.

Layout (all integers little-endian):
  magic "AEMB" | version u16 | records...
  record: name_len u16 | name bytes (utf-8) | rank u8 | extents u32 each |
          float64 payload, little-endian, row-major.
Round-trips must be bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AEMB"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    arrays: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        arrays[name] = arr.astype(np.float64)
    return arrays
