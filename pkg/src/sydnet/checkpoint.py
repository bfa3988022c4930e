"""SYDW checkpoint files.

Layout (little-endian)::

    b"SYDW" | u32 version=1 | u32 tensor_count
    tensor_count × ( u16 name_len | utf-8 name | u8 dtype (0=f32, 1=f64) | u8 rank
                     | rank × u32 dims | raw data )
    u64 config_hash

Parameters and batch-norm running moments are stored under their dotted
module paths; the epoch is stored as the rank-0 tensor ``__epoch__``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SYDW"
VERSION = 1
EPOCH_KEY = "__epoch__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    epoch: int
    config_hash: int


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], epoch: int, config_hash: int) -> None:
    items = dict(tensors)
    items[EPOCH_KEY] = np.asarray(float(epoch), dtype=np.float64)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        fh.write(struct.pack("<Q", config_hash & 0xFFFFFFFFFFFFFFFF))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(blob):
            raise CheckpointError(f"{path}: truncated name at byte {pos}")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = take(f"<{rank}I") if rank else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {name!r} truncated at byte {pos}")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
        pos += nbytes
    (config_hash,) = take("<Q")
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    epoch = int(tensors.pop(EPOCH_KEY, np.zeros(())))
    return Checkpoint(tensors, epoch, config_hash)
