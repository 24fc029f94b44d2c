"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes   b"CPRLCKPT"
    version  uint32    currently 1
    count    uint32    number of records
    record*  count times:
        name_len  uint32
        name      name_len bytes, UTF-8
        ndim      uint32
        dims      ndim x uint64
        values    prod(dims) x float64, row-major

Records are written in the order given, so a fixed parameter ordering yields
byte-identical files.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

MAGIC = b"CPRLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"{path}: truncated checkpoint at {name!r}")
            values = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
