"""Flat binary container for named float32 tensors.

Layout, all integers little-endian u32:

    magic  b"ACVP"
    version
    count
    count x [name_len, name (UTF-8), rank, dims[rank], payload (float32 LE)]

The format carries no alignment or compression; it exists so checkpoints can
be written and re-read byte-identically without pickle.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import BadMagic, DuplicateName, TruncatedPayload, VersionMismatch

__all__ = ["MAGIC", "VERSION", "save_tensors", "load_tensors"]

MAGIC = b"ACVP"
VERSION = 1

_U32 = struct.Struct("<I")


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedPayload(f"expected {n} bytes for {what}, got {len(data)}")
    return data


def _read_u32(fh: BinaryIO, what: str) -> int:
    return _U32.unpack(_read_exact(fh, 4, what))[0]


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a mapping of name -> array as one container file.

    Arrays are cast to float32; entry order follows the mapping's order so
    identical inputs produce identical bytes.
    """
    names = list(tensors)
    if len(set(names)) != len(names):
        raise DuplicateName("duplicate entry names in mapping")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION)
        _write_u32(fh, len(names))
        for name in names:
            # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
            arr = np.asarray(tensors[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            _write_u32(fh, len(encoded))
            fh.write(encoded)
            _write_u32(fh, arr.ndim)
            for dim in arr.shape:
                _write_u32(fh, dim)
            fh.write(arr.tobytes(order="C"))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container file back into a name -> float32 array dict.

    Raises BadMagic, VersionMismatch, TruncatedPayload, or DuplicateName on
    malformed input.
    """
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
        version = _read_u32(fh, "version")
        if version != VERSION:
            raise VersionMismatch(f"unsupported version {version}")
        count = _read_u32(fh, "entry count")
        for i in range(count):
            name_len = _read_u32(fh, f"entry {i} name length")
            name = _read_exact(fh, name_len, f"entry {i} name").decode("utf-8")
            if name in out:
                raise DuplicateName(f"entry name repeated: {name!r}")
            rank = _read_u32(fh, f"{name!r} rank")
            dims = tuple(_read_u32(fh, f"{name!r} dim {d}") for d in range(rank))
            n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(fh, 4 * n_values, f"{name!r} payload")
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
            out[name] = arr
    return out
