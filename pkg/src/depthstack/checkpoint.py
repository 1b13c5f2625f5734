"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"DSTKCKPT"
    1 byte    format version (1)
    uint32    length L of the NetworkSpec JSON
    L bytes   NetworkSpec as UTF-8 JSON (sorted keys)
    uint32    number of tensors T
    T times:  uint8 ndim, ndim x uint32 extents, prod(extents) x float32 values

Tensors are the coarse stack's (weight, bias) pairs in layer order followed by
the fine stack's.  Float32 parameters round-trip exactly; float64 parameters
are narrowed on save.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import CoarseNet, FineNet, NetworkSpec, build_networks

MAGIC = b"DSTKCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(spec: NetworkSpec, coarse: CoarseNet, fine: FineNet) -> bytes:
    spec_bytes = spec.to_json().encode("utf-8")
    tensors = coarse.state() + fine.state()
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(spec_bytes)), spec_bytes,
             struct.pack("<I", len(tensors))]
    for arr in tensors:
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, spec: NetworkSpec, coarse: CoarseNet, fine: FineNet) -> None:
    Path(path).write_bytes(to_bytes(spec, coarse, fine))


def from_bytes(buf: bytes, dtype=np.float32) -> tuple[NetworkSpec, CoarseNet, FineNet]:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    pos = 0
    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = take(1)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack("<I", take(4))
    spec = NetworkSpec.from_json(take(spec_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(take(4 * n), dtype="<f4").reshape(shape))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    coarse, fine = build_networks(spec, dtype)
    nc = len(coarse.tensors())
    if count != nc + len(fine.tensors()):
        raise CheckpointError(f"checkpoint holds {count} tensors, spec needs {nc + len(fine.tensors())}")
    coarse.load_state(arrays[:nc])
    fine.load_state(arrays[nc:])
    return spec, coarse, fine


def load_checkpoint(path: str | os.PathLike, dtype=np.float32) -> tuple[NetworkSpec, CoarseNet, FineNet]:
    return from_bytes(Path(path).read_bytes(), dtype)
