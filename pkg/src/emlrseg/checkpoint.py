"""Versioned binary checkpoint container and JSON-lines metrics logs.

Layout::

    8 bytes  magic  b"EMLRCKPT"
    u32      format version
    u64      header length in bytes
    header   UTF-8 JSON: meta (config echo, epoch, rng, optimiser step) and
             an entry table {name, dtype, shape, offset, nbytes}
    blob     concatenated little-endian arrays (float32 unless stored wider)

Header JSON is written with sorted keys so identical state gives identical
bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMLRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _le_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype.kind == "f":
        return "<f4"
    if arr.dtype.kind in "iu":
        return "<i8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    table = []
    blobs = []
    offset = 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        dt = _le_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "entries": table}, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = _PREFIX.size + hlen
    arrays = {}
    for e in header["entries"]:
        if base + e["offset"] + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated at entry {e['name']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=e["dtype"], count=count, offset=base + e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]


def with_prefix(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def strip_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}


class JsonlWriter:
    """Append-only JSON-lines sink with deterministic formatting."""

    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "w")

    def write(self, row: dict) -> None:
        self.fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
