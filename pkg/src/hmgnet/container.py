"""Deterministic binary container of named numpy arrays.

Used for the dataset cache and for model checkpoints. The format is
append-free and timestamp-free so that identical inputs always produce
byte-identical files (zip-based formats embed mtimes and break that).

Layout:
    magic  b"HMGC"
    u32    format version (little endian)
    u64    length of the UTF-8 JSON header
    bytes  JSON header: {"meta": {...}, "arrays": [[name, dtype, shape], ...]}
    bytes  raw little-endian array data, C order, in header order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"HMGC"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Malformed, truncated, or version-incompatible container file."""


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable meta dict to ``path``."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append([name, arr.dtype.str, list(arr.shape)])
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"meta": meta or {}, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(FORMAT_VERSION.to_bytes(4, "little"))
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path) -> tuple[dict, dict]:
    """Read a container; returns (arrays, meta)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: unsupported container version {version} "
            f"(expected {FORMAT_VERSION})"
        )
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    arrays = {}
    offset = 16 + hlen
    for name, dtype_str, shape in header["arrays"]:
        dtype = np.dtype(dtype_str)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(raw):
            raise ContainerError(f"{path}: truncated data for array {name!r}")
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype)
        arrays[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["meta"]
