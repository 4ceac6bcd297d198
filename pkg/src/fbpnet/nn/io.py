"""Versioned binary container for named float64 arrays.

Layout::

    8 bytes   magic  b"FBPNARR\\0"
    4 bytes   format version, uint32 little-endian
    4 bytes   manifest length L, uint32 little-endian
    L bytes   UTF-8 JSON manifest: {"arrays": [{"name": str, "shape": [int, ...]}, ...]}
    ...       each array as little-endian float64, C order, in manifest order

Used for parameter checkpoints and dataset samples alike.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FBPNARR\0"
VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    manifest = {"arrays": []}
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        manifest["arrays"].append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(blobs)


def decode_arrays(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:8] != MAGIC:
        raise FormatError("not an fbpnet array file (bad magic)")
    version, hlen = struct.unpack("<II", payload[8:16])
    if version != VERSION:
        raise FormatError(f"unsupported array file version {version}")
    manifest = json.loads(payload[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    out = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(payload):
            raise FormatError(f"array {entry['name']!r} is truncated")
        out[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset = end
    if offset != len(payload):
        raise FormatError("trailing bytes after the last array")
    return out


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_arrays(arrays))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())
