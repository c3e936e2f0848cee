"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"BXMR"  u32 version
    u32 header_len  header (UTF-8 JSON: model config, catalog, provenance, frozen names)
    u32 n_tensors
    per tensor: u32 name_len, name (UTF-8), u32 rank, u64 extents[rank], f64 values (row-major, '<f8')
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .model import ModelConfig, ParameterSet

MAGIC = b"BXMR"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterSet
    items: dict[str, int]
    markets: dict[str, int]
    provenance: dict = field(default_factory=dict)  # seed, epoch, phase, ...


def _write_blob(fh: BinaryIO, blob: bytes) -> None:
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "config": ckpt.params.config.to_dict(),
        "items": ckpt.items,
        "markets": ckpt.markets,
        "provenance": ckpt.provenance,
        "frozen": sorted(ckpt.params.frozen),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_blob(fh, json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<I", len(ckpt.params.values)))
        for name, arr in ckpt.params.values.items():
            _write_blob(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version = _read_u32(fh)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        header = json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8"))
        values = {}
        for _ in range(_read_u32(fh)):
            name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
            rank = _read_u32(fh)
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(shape, dtype=np.int64))
            values[name] = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    config = ModelConfig(**header["config"])
    params = ParameterSet(config, values, set(header.get("frozen", [])))
    return Checkpoint(params, header["items"], header["markets"], header.get("provenance", {}))
