"""Checkpoint container: JSON header plus named float32 blobs.

Layout (little-endian)::

    offset      size  field
    0           4     magic b"CLDK"
    4           4     container version (u32) = 1
    8           8     header length H in bytes (u64)
    16          H     UTF-8 JSON header
    16 + H      ...   blobs, back to back, each float32 row-major

The header carries ``format_version``, caller fields (config, step, ...), and a
``tensors`` list of ``{"name", "shape", "offset", "nbytes"}`` where ``offset``
counts from the first blob byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import FormatError

MAGIC = b"CLDK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        blob = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(header or {})
    meta["format_version"] = VERSION
    meta["tensors"] = entries
    encoded = json.dumps(meta, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    if len(raw) < _PREFIX.size:
        raise FormatError("truncated checkpoint prefix", offset=len(raw))
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[start:start + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint header is not JSON: {exc}", offset=start + exc.pos) from exc
    base = start + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise FormatError(f"blob {entry['name']!r} runs past end of file", offset=len(raw))
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * 4 != entry["nbytes"]:
            raise FormatError(f"blob {entry['name']!r} size does not match shape {shape}", offset=lo)
        tensors[entry["name"]] = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(shape).astype(np.float32)
    return header, tensors
