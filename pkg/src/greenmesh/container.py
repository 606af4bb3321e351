"""Read/write for the ``DGM1`` binary container.

Layout::

    b"DGM1" | uint32 LE header length | UTF-8 JSON header | zero pad to 8 | blocks

The JSON header carries the caller's metadata under ``"meta"`` and a ``"blocks"``
table (name, dtype, shape, offset, nbytes). Offsets are relative to the first
block. All numeric blocks are little-endian; floats are 64-bit, integers 32-bit.
Serialization is deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DGM1"
_ALLOWED = {"<f8", "<i4", "|i1", "|u1"}


class ContainerError(ValueError):
    """Raised for malformed or unreadable ``DGM1`` data."""


def _normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype.kind == "b":
        return np.ascontiguousarray(arr, dtype="<u1")
    if arr.dtype.kind in "iu":
        if arr.dtype.itemsize == 1:
            return np.ascontiguousarray(arr, dtype="<i1" if arr.dtype.kind == "i" else "<u1")
        if arr.size and (arr.max() > np.iinfo(np.int32).max or arr.min() < np.iinfo(np.int32).min):
            raise ContainerError("integer block does not fit in int32")
        return np.ascontiguousarray(arr, dtype="<i4")
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def to_bytes(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    blocks = []
    payload = []
    offset = 0
    for name in arrays:
        arr = _normalize(arrays[name])
        raw = arr.tobytes(order="C")
        blocks.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload.append(raw)
        pad = (-len(raw)) % 8
        payload.append(b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps({"meta": meta, "blocks": blocks}, sort_keys=True, separators=(",", ":"))
    hbytes = header.encode("utf-8")
    pad = (-(len(MAGIC) + 4 + len(hbytes))) % 8
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"\0" * pad + b"".join(payload)


def from_bytes(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ContainerError("missing DGM1 magic bytes")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    start = 8 + hlen
    start += (-start) % 8
    arrays = {}
    for blk in header["blocks"]:
        if blk["dtype"] not in _ALLOWED:
            raise ContainerError(f"block {blk['name']!r} has unsupported dtype {blk['dtype']}")
        lo = start + blk["offset"]
        hi = lo + blk["nbytes"]
        if hi > len(data):
            raise ContainerError(f"block {blk['name']!r} truncated")
        arr = np.frombuffer(data[lo:hi], dtype=blk["dtype"]).reshape(blk["shape"])
        arrays[blk["name"]] = arr.copy()
    return header["meta"], arrays


def write(path: str | Path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> str:
    """Write a container and return the sha256 of its bytes."""
    data = to_bytes(meta, arrays)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return from_bytes(Path(path).read_bytes())


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
