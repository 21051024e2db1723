"""Binary checkpoints: versioned named-blob container, bit-exact roundtrip.

Layout (little-endian):
    magic(4) | u32 version | u64 step | u32 len + config-hash utf8 |
    u32 len + meta-json utf8 | u32 n_blobs | blobs...
Blob: u32 len + name utf8 | u8 dtype code | u8 ndim | u32 dims... | payload.

Bridge checkpoints (magic BRGC) carry both bridging modules, codebook EMA
state and optimizer moments; generator checkpoints (magic BRGA) additionally
record the bridge checkpoint's config hash for lineage checking at load time.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigHashMismatchError
from .features import _atomic_write

MAGIC_BRIDGE = b"BRGC"
MAGIC_AR = b"BRGA"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_checkpoint(path, magic: bytes, step: int, config_hash: str, meta: dict,
                    blobs: dict[str, np.ndarray]):
    parts = [magic, struct.pack("<IQ", VERSION, step)]
    h = config_hash.encode("utf-8")
    parts.append(struct.pack("<I", len(h)) + h)
    m = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(m)) + m)
    parts.append(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"blob {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    _atomic_write(Path(path), b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, magic: bytes, expected_config_hash: str | None = None):
    """Returns (step, config_hash, meta, blobs); validates magic/version/hash."""
    r = _Reader(Path(path).read_bytes(), path)
    got_magic = r.take(4)
    if got_magic != magic:
        raise CheckpointError(f"{path}: bad checkpoint magic {got_magic!r}, expected {magic!r}")
    (version, step) = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    config_hash = r.take(hlen).decode("utf-8")
    if expected_config_hash is not None and config_hash != expected_config_hash:
        raise ConfigHashMismatchError(
            f"{path}: checkpoint config hash {config_hash[:12]}... does not match expected {expected_config_hash[:12]}..."
        )
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (n_blobs,) = r.unpack("<I")
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: blob {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        blobs[name] = data.copy()
    if r.off != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.off} trailing bytes after blobs")
    return int(step), config_hash, meta, blobs
