"""Binary checkpoint of named float32 tensors.

Layout, all integers little-endian:

    magic "MSAM" | u32 version | u32 len + config hash utf8
    | u32 len + metrics JSON utf8 | u32 tensor count
    | per tensor: u16 len + name utf8, u8 ndim, u32 dims..., f32 data

Loading a checkpoint written by this module is bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MSAM"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: str
    metrics: dict


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_hash: str = "",
                    metrics: dict | None = None) -> None:
    metrics_blob = json.dumps(metrics or {}, sort_keys=True).encode("utf-8")
    hash_blob = config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(hash_blob)))
        fh.write(hash_blob)
        fh.write(struct.pack("<I", len(metrics_blob)))
        fh.write(metrics_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_blob)))
            fh.write(name_blob)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"{path}: truncated while reading {what} "
                              f"(wanted {n} bytes, got {len(blob)})")
    return blob


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version} unsupported "
                                  f"(expected {VERSION})")
        (hash_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "hash length"))
        config_hash = _read_exact(fh, hash_len, path, "config hash").decode("utf-8")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4, path, "metrics length"))
        metrics = json.loads(_read_exact(fh, mlen, path, "metrics").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, path, "name length"))
            name = _read_exact(fh, nlen, path, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path, "rank"))
            dims = struct.unpack(f"<{ndim}I",
                                 _read_exact(fh, 4 * ndim, path, "dims"))
            size = int(np.prod(dims)) if ndim else 1
            blob = _read_exact(fh, 4 * size, path, f"data of {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return Checkpoint(tensors=tensors, config_hash=config_hash, metrics=metrics)
