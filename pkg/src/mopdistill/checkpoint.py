"""Checkpoint files: one JSON header line, then a contiguous float32 blob.

Header schema:
    {"meta": {...},
     "params": [{"name": str, "shape": [int...], "offset": int}, ...]}

Offsets are byte positions into the little-endian float32 blob that follows
the header's newline. Parameters are stored in sorted-name order so the same
network always serializes identically. In-memory tensors stay float64; the
32-bit storage is a deliberate compactness trade.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor


class CheckpointError(RuntimeError):
    pass


def save_params(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    names = sorted(params)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = params[name].data.astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = {"meta": meta or {}, "params": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for b in blobs:
            f.write(b)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ({name: float64 array}, meta)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    blob = raw[nl + 1:]
    out = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise CheckpointError(f"{path}: blob truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
    return out, header.get("meta", {})


def restore_params(path, params: dict[str, Tensor]) -> dict:
    """Load a checkpoint into existing tensors (shapes must match)."""
    loaded, meta = load_params(path)
    missing = set(params) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: "
                f"checkpoint {arr.shape} vs network {p.data.shape}")
        p.data = arr
    return meta
