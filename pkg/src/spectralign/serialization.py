"""Versioned binary container for checkpoints.

Byte layout (all integers little-endian):

    bytes 0..7    magic ``b"SPALIGN\\x00"``
    bytes 8..15   uint64 header length ``H``
    bytes 16..16+H  UTF-8 JSON header
    remainder     concatenated raw tensor payloads

The JSON header is ``{"version": 1, "meta": {...}, "tensors": [...]}`` where
each tensor entry is ``{"name", "dtype", "shape", "offset", "nbytes",
"sha256"}``; ``offset`` is relative to the start of the payload section.
Tensors are stored contiguous, little-endian, in entry order. Checksums are
verified on read.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SPALIGN\x00"
VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "uint8": np.uint8,
}


def pack(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    """Serialize a meta dict plus named tensors into one blob."""
    entries = []
    payload = bytearray()
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        payload.extend(raw)
    header = json.dumps(
        {"version": VERSION, "meta": meta, "tensors": entries},
        sort_keys=True,
    ).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + bytes(payload)


def unpack(blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Inverse of :func:`pack`; verifies magic, version, and checksums."""
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated container header")
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt container header: {e}") from e
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"container version {header.get('version')} != supported {VERSION}"
        )
    payload = blob[16 + hlen:]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated payload for {entry['name']!r}")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header["meta"], tensors
