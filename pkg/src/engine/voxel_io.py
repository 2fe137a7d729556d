"""Voxel file format.

A file is one UTF-8 JSON header line ``{"edge_voxels", "binary_flag", "encoding"}``
terminated by ``\\n`` and followed by the payload:

- ``rle``: runs over the C-order (z, y, x) flattening, each run a uint8 value
  followed by a little-endian uint32 length. Used for binary grids.
- ``raw``: little-endian float32 values in C order. Used for continuous grids.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .voxel_core import VoxelGrid

_RUN = np.dtype([("value", "u1"), ("length", "<u4")])


def _encode_rle(flat: np.ndarray) -> bytes:
    values = flat.astype(np.uint8)
    change = np.flatnonzero(np.diff(values)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [values.size]]))
    runs = np.empty(starts.size, dtype=_RUN)
    runs["value"] = values[starts]
    runs["length"] = lengths
    return runs.tobytes()


def _decode_rle(payload: bytes, size: int) -> np.ndarray:
    runs = np.frombuffer(payload, dtype=_RUN)
    flat = np.repeat(runs["value"], runs["length"]).astype(np.float64)
    if flat.size != size:
        raise ValueError(f"RLE payload expands to {flat.size} voxels, expected {size}")
    return flat


def encode_voxels(grid: VoxelGrid) -> bytes:
    encoding = "rle" if grid.binary_flag else "raw"
    header = {"edge_voxels": grid.edge_voxels, "binary_flag": grid.binary_flag, "encoding": encoding}
    flat = grid.occupancy.reshape(-1)
    payload = _encode_rle(flat) if encoding == "rle" else flat.astype("<f4").tobytes()
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload


def decode_voxels(blob: bytes) -> VoxelGrid:
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise ValueError("voxel file has no header terminator")
    header = json.loads(head.decode("utf-8"))
    l = int(header["edge_voxels"])
    if header["encoding"] == "rle":
        flat = _decode_rle(payload, l**3)
    elif header["encoding"] == "raw":
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if flat.size != l**3:
            raise ValueError(f"raw payload holds {flat.size} values, expected {l**3}")
        # float32 storage can push sigmoid outputs a hair outside [0, 1]
        flat = np.clip(flat, 0.0, 1.0)
    else:
        raise ValueError(f"unknown voxel encoding {header['encoding']!r}")
    return VoxelGrid(flat.reshape(l, l, l), binary_flag=bool(header["binary_flag"]))


def write_voxels(path: str | Path, grid: VoxelGrid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_voxels(grid))
    return path


def read_voxels(path: str | Path) -> VoxelGrid:
    return decode_voxels(Path(path).read_bytes())
