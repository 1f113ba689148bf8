"""Versioned binary checkpoints with bit-exact reload.

Layout: 8-byte magic, uint32 LE format version, uint32 LE header length, a
JSON header ({"config": ..., "arrays": [{"name","shape","dtype"},...]}),
then the raw little-endian bytes of each array in declared order. A plain
archive format would have been close, but zip containers embed timestamps
and break byte-for-byte determinism of repeated saves, which the round-trip
guarantees here depend on.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

MAGIC_TEXT = b"AYCE-TXT"
MAGIC_VISUAL = b"AYCE-VIS"
MAGIC_EMBED = b"AYCE-EMB"

_MAGICS = (MAGIC_TEXT, MAGIC_VISUAL, MAGIC_EMBED)


def _little_endian(arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_checkpoint(path, magic, config, arrays):
    """Write a checkpoint atomically (temp file + rename).

    arrays is an ordered list of (name, ndarray) pairs; order is preserved
    and is part of the format.
    """
    if magic not in _MAGICS:
        raise CheckpointError(f"unknown checkpoint magic {magic!r}")
    manifest = []
    blobs = []
    for name, arr in arrays:
        arr = _little_endian(np.asarray(arr))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    header = json.dumps({"config": config, "arrays": manifest}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path, expected_magic=None):
    """Read a checkpoint; returns (magic, config, ordered {name: array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic = raw[:8]
    if magic not in _MAGICS:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if expected_magic is not None and magic != expected_magic:
        raise CheckpointError(
            f"{path}: expected a {expected_magic.decode()} checkpoint, found {magic.decode()}")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}")
    arrays = {}
    offset = 16 + header_len
    for entry in header.get("arrays", ()):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        nbytes = int(nbytes)
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
        arrays[entry["name"]] = arr
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return magic, header.get("config", {}), arrays
