"""Named-tensor container.

Layout: 8-byte magic, uint32 version, uint32 manifest length, UTF-8 JSON
manifest, then little-endian float32 payloads at the manifest offsets
(relative to the start of the payload block).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LMTENSOR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = {"version": VERSION, "tensors": {}, "meta": meta or {}}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest["tensors"][name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    manifest = json.loads(raw[16 : 16 + n].decode())
    base = 16 + n
    out = {}
    for name, info in manifest["tensors"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + info["offset"]
        if start + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return out, manifest.get("meta", {})
