"""Versioned binary container: magic, format version, JSON header, raw arrays.

Layout::

    b"FEDSLATE"            8-byte magic
    <u4 version
    <u8 header length H
    H bytes of UTF-8 JSON  {"meta": ..., "arrays": [[name, dtype, shape, offset, nbytes], ...]}
    array payload           little-endian, concatenated in table order

Writes are deterministic (sorted JSON keys, fixed array order) so that a
load/save round trip reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError

MAGIC = b"FEDSLATE"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f8": "<f8", "i8": "<i8", "u4": "<u4", "b1": "|b1"}


def _dtype_code(arr: np.ndarray) -> str:
    kind = arr.dtype
    if kind == np.float64:
        return "f8"
    if kind == np.int64:
        return "i8"
    if kind == np.uint32:
        return "u4"
    if kind == np.bool_:
        return "b1"
    raise CheckpointError(f"unsupported array dtype {kind}")


def dumps(meta: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        table.append([name, code, list(arr.shape), offset, len(raw)])
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing header")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    base = start + hlen
    arrays = {}
    for name, code, shape, offset, nbytes in header["arrays"]:
        lo, hi = base + offset, base + offset + nbytes
        if hi > len(blob):
            raise CheckpointError(f"truncated checkpoint: array {name!r} incomplete")
        arr = np.frombuffer(blob[lo:hi], dtype=_DTYPES[code]).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if base + sum(a[4] for a in header["arrays"]) != len(blob):
        raise CheckpointError("checkpoint has trailing or missing bytes")
    return header["meta"], arrays


def write(path, meta: dict, arrays: Dict[str, np.ndarray]):
    blob = dumps(meta, arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
