"""Single-file checkpoints: one JSON header line, then raw little-endian float64 arrays."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "vpgkit-ckpt-1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    names = list(tensors)
    header = {
        "format": MAGIC,
        "config": config or {},
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    offset = nl + 1
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        out[entry["name"]] = arr.reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return out, header["config"]
