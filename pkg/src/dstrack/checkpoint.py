"""Flat binary container of named float32 tensors.

Layout: magic ``DSTK`` | u32 format version | u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, u32 extents, raw
little-endian float32 data. Round-trips float32 arrays bit-exactly.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSTK"
FORMAT_VERSION = 1


class CheckpointFormatError(IOError):
    pass


def save_tensors(path: str | Path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint format version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            raw = _read_exact(f, 4 * n, f"data of {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointFormatError("trailing bytes after final tensor record")
    return arrays
