"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"BSCKPT\\x00\\x00"
    offset 8   u32       format version (currently 1)
    offset 12  u64       header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          data blob

The header is ``{"metadata": {...}, "step": int, "tensors": [...]}`` where
each tensor record is ``{"name", "group", "dtype", "shape", "offset",
"nbytes"}``. ``group`` is ``"param"``, ``"adam_m"`` or ``"adam_v"``;
``dtype`` is a numpy little-endian type string such as ``"<f4"``;
``offset`` is relative to the start of the blob and 8-byte aligned. The
header is serialized with sorted keys so identical stores produce
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParameterStore

MAGIC = b"BSCKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _records(store: ParameterStore):
    for name, t in store.params.items():
        yield name, "param", t.data
        if name in store.m:
            yield name, "adam_m", store.m[name]
            yield name, "adam_v", store.v[name]


def to_bytes(store: ParameterStore, metadata: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, group, arr in _records(store):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "group": group, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        pad = (-len(raw)) % 8
        chunks.append(raw + b"\x00" * pad)
        offset += len(raw) + pad
    header = json.dumps({"metadata": metadata or {}, "step": store.step, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(buf: bytes) -> tuple[ParameterStore, dict]:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 20 + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(buf[20:20 + hlen].decode("utf-8"))
    blob = memoryview(buf)[20 + hlen:]
    store = ParameterStore()
    store.step = int(header["step"])
    for rec in header["tensors"]:
        start, n = rec["offset"], rec["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"truncated data for tensor {rec['name']!r}")
        arr = np.frombuffer(blob[start:start + n], dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        if rec["group"] == "param":
            store.add(rec["name"], arr)
        elif rec["group"] == "adam_m":
            store.m[rec["name"]] = arr.copy()
        elif rec["group"] == "adam_v":
            store.v[rec["name"]] = arr.copy()
        else:
            raise CheckpointError(f"unknown tensor group {rec['group']!r}")
    return store, header["metadata"]


def save(path, store: ParameterStore, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(store, metadata))


def load(path) -> tuple[ParameterStore, dict]:
    return from_bytes(Path(path).read_bytes())
