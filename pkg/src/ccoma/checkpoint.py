"""Binary parameter checkpoints.

Layout: magic ``b"CCOMA\\x01"`` followed by records of
``[u32 name length][utf-8 name][u8 dtype][u8 rank][u32 dims...][raw LE values]``.
dtype code 0 is float32, 1 is float64. All integers little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CCOMA\x01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return bytes(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic bytes")
    pos = len(MAGIC)
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated record name")
            pos += n
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(blob):
                raise CheckpointError(f"truncated values for {name!r}")
            arr = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=pos)
            arrays[name] = arr.reshape(dims).astype(dt.newbyteorder("="), copy=True)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return arrays


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
