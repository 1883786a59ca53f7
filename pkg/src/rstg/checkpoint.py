"""Parameter checkpoint files.

Layout: magic b"RSTG1", a little-endian u32 header length, a UTF-8 JSON
header listing (name, shape, offset) per parameter plus free-form metadata,
then the raw data section.  Values are always stored as little-endian
float64 regardless of the engine's training precision; ``offset`` is the
byte offset of each parameter inside the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Parameter

MAGIC = b"RSTG1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params: Sequence[Parameter], metadata: dict | None = None) -> None:
    path = Path(path)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate parameter names: {dupes}")

    entries = []
    offset = 0
    blobs = []
    for p in params:
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "params": entries,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ({name: float64 array}, metadata)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {raw[:len(MAGIC)]!r}")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    header = json.loads(raw[header_start: header_start + header_len].decode("utf-8"))
    data_start = header_start + header_len

    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, header.get("metadata", {})


def restore_parameters(params: Sequence[Parameter], arrays: dict[str, np.ndarray]) -> None:
    """Load saved values into live parameters (cast to the engine dtype)."""
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {p.name!r}")
        saved = arrays[p.name]
        if saved.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}: "
                                  f"checkpoint {saved.shape} vs model {p.shape}")
        p.data = saved.astype(p.data.dtype)
