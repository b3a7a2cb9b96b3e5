"""Named-tensor checkpoint files (M2CK).

A checkpoint is an ordered mapping of names to float32 arrays. Scalars ride
along as rank-0 entries under "meta.*" names (k, lambda weights, flags), so
a checkpoint is self-describing without a sidecar file.

Layout:
    magic "M2CK" | version u32 | count u32
    | count * { name: u32 length + UTF-8 | rank u32 | dims u32[rank] | f32 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"M2CK"
VERSION = 1
FILE_EXTENSION = ".m2ck"

MAX_RANK = 8  # sanity bound; nothing in the pipeline exceeds rank 2


class CheckpointError(Exception):
    """Base class for checkpoint format failures."""


class BadCheckpointMagicError(CheckpointError):
    pass


class UnsupportedCheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(tensors: dict[str, np.ndarray], destination) -> int:
    """Write name->array pairs in insertion order; returns bytes written."""
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fp:
            return save_checkpoint(tensors, fp)
    fp: BinaryIO = destination
    n = 0
    fp.write(MAGIC)
    fp.write(struct.pack("<II", VERSION, len(tensors)))
    n += 4 + 8
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim > MAX_RANK:
            raise CheckpointError(f"{name}: rank {arr.ndim} exceeds limit {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise CheckpointError(f"{name}: refusing to store NaN or Inf")
        raw_name = name.encode("utf-8")
        fp.write(struct.pack("<I", len(raw_name)))
        fp.write(raw_name)
        fp.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fp.write(struct.pack("<I", dim))
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fp.write(payload)
        n += 4 + len(raw_name) + 4 + 4 * arr.ndim + len(payload)
    return n


def _read_exact(fp: BinaryIO, count: int, what: str) -> bytes:
    raw = fp.read(count)
    if len(raw) != count:
        raise TruncatedCheckpointError(f"stream ended inside {what}")
    return raw


def load_checkpoint(source) -> dict[str, np.ndarray]:
    """Read back name->float32 array pairs in stored order."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fp:
            return load_checkpoint(fp)
    fp: BinaryIO = source
    magic = fp.read(4)
    if magic != MAGIC:
        raise BadCheckpointMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    version, count = struct.unpack("<II", _read_exact(fp, 8, "header"))
    if version != VERSION:
        raise UnsupportedCheckpointVersionError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fp, 4, f"entry {i} name length"))
        name = _read_exact(fp, name_len, f"entry {i} name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fp, 4, f"{name} rank"))
        if rank > MAX_RANK:
            raise CheckpointError(f"{name}: rank {rank} exceeds limit {MAX_RANK}")
        dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank, f"{name} dims")) if rank else ()
        n_elems = 1
        for dim in dims:
            n_elems *= dim
        raw = _read_exact(fp, n_elems * 4, f"{name} payload")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = arr
    return out


def put_scalar(tensors: dict[str, np.ndarray], name: str, value: float) -> None:
    tensors[name] = np.asarray(value, dtype=np.float32)


def get_scalar(tensors: dict[str, np.ndarray], name: str) -> float:
    arr = tensors[name]
    if arr.ndim != 0:
        raise CheckpointError(f"{name}: expected rank-0 scalar, got rank {arr.ndim}")
    return float(arr)
