"""Binary checkpoint format shared by every module.

Layout (all integers little-endian u32)::

    b"DANT" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 values

Values are stored as raw little-endian float32, so a float32 tensor
round-trips bit-exactly.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping, Union

import numpy as np

MAGIC = b"DANT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    _write(buf, tensors)
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    return _read(io.BytesIO(data))


def save(path: Union[str, os.PathLike], tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        _write(fh, tensors)


def load(path: Union[str, os.PathLike]) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return _read(fh)


def _write(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _take(fh: BinaryIO, n: int, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return chunk


def _read(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _take(fh, 4, "magic") != MAGIC:
        raise CheckpointError("not a DANT checkpoint (bad magic)")
    version, count = struct.unpack("<II", _take(fh, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _take(fh, 4, "name length"))
        name = _take(fh, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _take(fh, 4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", _take(fh, 4 * rank, f"extents of {name}")) if rank else ()
        count_values = int(np.prod(shape)) if rank else 1
        raw = _take(fh, 4 * count_values, f"values of {name}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return out
