"""Binary file formats for grids, masks, and checkpoints.

Grid format (.voxg): magic "VOXG", version u16=1, X, Y, Z as u32, K as u16,
voxel_size as f32, then X*Y*Z label bytes in C order (z fastest).  All fields
little-endian.  Visibility masks (.voxm) reuse the same header with K = 2 and
flag bytes as payload.

Checkpoint format (.ckpt): magic "OCKP", version u16=1, a u32-length JSON
header describing named float32 tensors (name, shape, byte offset, length)
plus the training config and seed, then the raw tensor bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grids import VoxelGrid, VisibilityMask

_GRID_MAGIC = b"VOXG"
_GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sHIIIHf")

_CKPT_MAGIC = b"OCKP"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")


def write_grid(path: str | Path, grid: VoxelGrid) -> None:
    header = _GRID_HEADER.pack(_GRID_MAGIC, _GRID_VERSION, *grid.dims,
                               grid.num_classes, grid.voxel_size)
    Path(path).write_bytes(header + grid.labels.tobytes(order="C"))


def read_grid(path: str | Path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, x, y, z, k, voxel_size = _GRID_HEADER.unpack_from(raw)
    if magic != _GRID_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _GRID_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = x * y * z
    payload = raw[_GRID_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} label bytes, found {len(payload)}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(x, y, z)
    return VoxelGrid(labels, voxel_size, k)


def write_mask(path: str | Path, mask: VisibilityMask, voxel_size: float = 1.0) -> None:
    header = _GRID_HEADER.pack(_GRID_MAGIC, _GRID_VERSION, *mask.dims, 2, voxel_size)
    Path(path).write_bytes(header + mask.flags.tobytes(order="C"))


def read_mask(path: str | Path) -> VisibilityMask:
    grid = read_grid(path)
    if grid.num_classes != 2:
        raise ValueError(f"{path}: mask files must declare 2 classes, found {grid.num_classes}")
    return VisibilityMask(grid.labels)


def write_json(path: str | Path, payload: dict) -> None:
    """Write JSON with sorted keys so identical payloads are byte-identical."""
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray],
                    config: dict, seed: int, meta: dict | None = None) -> None:
    """Serialize named float32 tensors plus provenance (config and seed)."""
    directory = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        # np.asarray, not ascontiguousarray: the latter promotes 0-d arrays to
        # 1-d, and tobytes() copies into C order on its own.
        arr = np.asarray(tensors[name], dtype=np.float32)
        blob = arr.tobytes(order="C")
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"tensors": directory, "config": config, "seed": int(seed),
              "meta": meta or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (tensors, header) where header holds config, seed, and meta."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, header_len = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = _CKPT_HEADER.size
    header = json.loads(raw[body:body + header_len].decode("utf-8"))
    base = body + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        blob = raw[start:start + entry["length"]]
        if len(blob) != entry["length"]:
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=np.float32).reshape(entry["shape"]).copy()
    return tensors, header
