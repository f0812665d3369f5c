"""Versioned binary checkpoint container.

Layout: magic bytes, format version, a 32-byte config-fingerprint hash, a
JSON metadata blob, then named parameter tensors as (name, shape,
row-major float64 data).  Loading verifies magic/version and, when the
caller supplies an expected fingerprint, rejects mismatches.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError

MAGIC = b"BKPT"
FORMAT_VERSION = 1


def config_fingerprint(resolved: dict) -> str:
    """sha256 over the canonical JSON form of a resolved config."""
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_checkpoint(path, fingerprint: str, meta: dict, tensors: dict[str, np.ndarray]):
    path = Path(path)
    fp_bytes = bytes.fromhex(fingerprint)
    if len(fp_bytes) != 32:
        raise ValueError("fingerprint must be a 32-byte hex digest")
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(fp_bytes)
        f.write(struct.pack("<Q", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.tobytes())


def read_checkpoint(path, expected_fingerprint: Optional[str] = None):
    """Returns (fingerprint, meta, tensors); raises CheckpointError on damage."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        fingerprint = f.read(32).hex()
        if expected_fingerprint is not None and fingerprint != expected_fingerprint:
            raise CheckpointError(
                f"{path}: config fingerprint mismatch "
                f"(checkpoint {fingerprint[:12]}..., expected {expected_fingerprint[:12]}...)"
            )
        (meta_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return fingerprint, meta, tensors
