"""Tensor container: JSON manifest followed by a raw little-endian payload.

Layout::

    b"URTENSOR"  | uint64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest holds ``{"version": "1", "tensors": [...], "meta": {...}}``;
each tensor entry lists ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes`` relative to the payload start. Keys are sorted and entries keep
insertion order, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any, BinaryIO, Dict, Mapping, Tuple

import numpy as np

MAGIC = b"URTENSOR"
VERSION = "1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "u1", "int32": "<i4", "int64": "<i8"}


class FormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None,
          dtype: str | None = "float32") -> bytes:
    """Serialise named arrays. ``dtype`` forces a storage dtype (None keeps each array's)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = dtype or arr.dtype.name
        if key not in _DTYPES:
            raise FormatError(f"{name}: unsupported dtype {key}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "tensors": entries, "meta": dict(meta or {})},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def loads(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + mlen].decode("utf-8"))
    if manifest.get("version") != VERSION:
        raise FormatError(f"unsupported container version {manifest.get('version')!r}")
    base = 16 + mlen
    out = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"{e['name']}: truncated payload")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out, manifest["meta"]


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
         meta: Mapping[str, Any] | None = None, dtype: str | None = "float32") -> None:
    blob = dumps(tensors, meta, dtype)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def write_record(fh: BinaryIO, blob: bytes) -> None:
    """Append one length-prefixed container to a record stream."""
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def read_records(fh: BinaryIO):
    while True:
        head = fh.read(8)
        if not head:
            return
        if len(head) != 8:
            raise FormatError("truncated record header")
        (n,) = struct.unpack("<Q", head)
        blob = fh.read(n)
        if len(blob) != n:
            raise FormatError("truncated record")
        yield blob
