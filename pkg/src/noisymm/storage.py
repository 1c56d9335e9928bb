"""Checksummed container for named numpy arrays.

Layout::

    magic (8 bytes)  b"NMMARR\\x00\\x01"
    header length    uint64 little endian
    header           UTF-8 JSON: format version, kind, free metadata,
                     array table (name, dtype, shape, offset, nbytes),
                     sha256 of the payload
    payload          raw C-order array bytes, concatenated

The same container stores datasets and model checkpoints; ``kind`` tells
them apart.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NMMARR\x00\x01"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<i8", "|b1"}


class StorageError(ValueError):
    pass


class ChecksumError(StorageError):
    pass


def _normalise(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.bool_:
        return arr
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype("<i8", copy=False)
    return arr.astype("<f8", copy=False)


def write_arrays(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = _normalise(arr)
        raw = arr.tobytes(order="C")
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": table,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


def read_arrays(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Load a container; returns ``(arrays, meta)``.

    Raises :class:`StorageError` on a bad magic, unknown version, wrong kind or
    truncation, and :class:`ChecksumError` when the payload hash disagrees.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise StorageError(f"{path}: not a noisymm array file")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(blob) < start + hlen:
        raise StorageError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ChecksumError(f"{path}: corrupt header ({err})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise StorageError(f"{path}: format version {header.get('format_version')!r}, "
                           f"expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise StorageError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    payload = blob[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise StorageError(f"{path}: truncated payload ({len(payload)} of "
                           f"{header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise StorageError(f"{path}: unsupported dtype {entry['dtype']}")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
