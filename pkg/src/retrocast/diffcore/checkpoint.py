"""Binary checkpoint format: versioned header + named float64 blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import ParamStore

MAGIC = b"RCCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed files or shape/name mismatches."""


def save_checkpoint(store: ParamStore, path) -> None:
    index = [[name, list(p.shape)] for name, p in store.items()]
    header = json.dumps(index).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for _, p in store.items():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(store: ParamStore, path) -> None:
    """Load values into an already-built store; dims must match exactly."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    try:
        index = json.loads(raw[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen

    stored_names = [name for name, _ in index]
    if stored_names != store.names():
        missing = set(store.names()) ^ set(stored_names)
        raise CheckpointError(
            f"{path}: parameter set mismatch (differs on {sorted(missing)})"
        )
    for name, shape in index:
        shape = tuple(shape)
        p = store[name]
        if p.shape != shape:
            raise CheckpointError(
                f"{path}: {name} has shape {shape}, model expects {p.shape}"
            )
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name}")
        p.value = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
