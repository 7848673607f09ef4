"""Flat named-array container: a JSON header followed by raw little-endian
buffers. Used for parameter checkpoints ("tbsim-ckpt/1") and the episode
binary cache (.epb files).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TBAR"

_DTYPES = {"<f4": "<f4", "<f8": "<f8", "<i4": "<i4", "<i8": "<i8", "|b1": "|b1"}


def _wire_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "<f4" if arr.dtype.itemsize == 4 else "<f8"
    if kind == "i":
        return "<i4" if arr.dtype.itemsize <= 4 else "<i8"
    if kind == "b":
        return "|b1"
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def save_arrays(path: str | Path, version: str, arrays: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        wd = _wire_dtype(arr)
        buf = arr.astype(np.dtype(wd)).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": wd, "nbytes": len(buf)})
        blobs.append(buf)
    header = json.dumps({"version": version, "arrays": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_arrays(path: str | Path, expect_version: str | None = None):
    """Returns (version, arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        version = header["version"]
        if expect_version is not None and version != expect_version:
            raise ValueError(f"{path}: version {version!r}, expected {expect_version!r}")
        arrays = {}
        for e in header["arrays"]:
            if e["dtype"] not in _DTYPES:
                raise ValueError(f"{path}: unknown dtype tag {e['dtype']!r}")
            buf = f.read(e["nbytes"])
            arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            arrays[e["name"]] = arr.copy()
    return version, arrays, header.get("meta", {})


CHECKPOINT_VERSION = "tbsim-ckpt/1"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    save_arrays(path, CHECKPOINT_VERSION, state, meta)


def load_checkpoint(path: str | Path):
    """Returns (state_dict, meta)."""
    _, arrays, meta = load_arrays(path, CHECKPOINT_VERSION)
    return arrays, meta
