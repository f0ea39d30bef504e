"""Versioned binary container for named float32 tensors plus a JSON header.

Layout: 4-byte magic "LEGO" | u32 LE format version | u32 LE header length
| UTF-8 JSON header | raw payload.  The header carries arbitrary metadata
under "meta" and a tensor manifest (name, shape, byte offset) sorted by
name; the payload is the tensors' little-endian float32 bytes in manifest
order.  Serialisation is canonical (sorted keys, fixed separators), so
save(load(x)) reproduces x byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LEGO"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    manifest = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({"meta": meta, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        f.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    payload = blob[12 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
        expected = max(expected, end)
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload length does not match manifest")
    return tensors, header["meta"]
