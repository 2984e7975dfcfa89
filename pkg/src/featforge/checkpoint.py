"""Binary checkpoint container for model tensors.

Layout::

    magic (5 bytes) | version u32 LE | header length u32 LE | header JSON (utf-8)
    | tensors as little-endian float64, in header order

The header records dims, the vocabulary fingerprint and every tensor's name
and shape, so a file can be read without outside knowledge.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, magic: bytes, header: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    header = dict(header)
    header["tensors"] = [[name, list(t.shape)] for name, t in tensors.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_container(path, magic: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise CheckpointError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    off = len(magic)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off += 8
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    off += hlen
    tensors = OrderedDict()
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data at {name!r}")
        tensors[name] = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, tensors
