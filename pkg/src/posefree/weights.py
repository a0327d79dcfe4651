"""Flat weight blobs: a JSON header followed by little-endian float32 data.

Layout::

    b"PFWB" | uint64 LE header length | UTF-8 JSON header | float32 LE payload

The header lists every tensor's name and shape in payload order, the seed
the weights were generated from, and a SHA-256 digest of the payload.
The same layout is used to dump cost volumes for offline inspection.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptWeights

MAGIC = b"PFWB"


def as_float32_exact(x: np.ndarray) -> np.ndarray:
    """Round to float32 and back so saving and reloading is lossless."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def save_blob(path, tensors: dict, seed=None, meta: dict | None = None) -> None:
    arrays = [(name, np.asarray(arr, dtype="<f4")) for name, arr in tensors.items()]
    payload = b"".join(a.tobytes(order="C") for _, a in arrays)
    header = {
        "seed": seed,
        "meta": meta or {},
        "tensors": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(payload)


def load_blob(path):
    """Return ``(tensors, header)``; raise :class:`CorruptWeights` on any defect."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptWeights(f"{path}: bad magic")
    (n,) = struct.unpack("<Q", data[4:12])
    try:
        header = json.loads(data[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptWeights(f"{path}: unreadable header") from exc
    payload = data[12 + n :]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptWeights(f"{path}: payload checksum mismatch")
    tensors = {}
    offset = 0
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = payload[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CorruptWeights(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = (
            np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(entry["shape"])
        )
        offset += 4 * count
    if offset != len(payload):
        raise CorruptWeights(f"{path}: trailing bytes after last tensor")
    return tensors, header
