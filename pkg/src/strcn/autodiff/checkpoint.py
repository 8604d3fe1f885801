"""Flat binary checkpoint of named float64 arrays.

Layout (little endian)::

    b"STRCNCK1"  uint32 count
    repeated count times:
        uint32 name_len, name (utf-8), uint32 ndim, int64[ndim] shape,
        float64[prod(shape)] values

Arrays are written in sorted name order so identical weights give identical
files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"STRCNCK1"


def save_arrays(arrays: Mapping[str, np.ndarray], path: Union[str, Path]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
