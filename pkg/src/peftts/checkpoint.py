"""Little-endian tensor-table container used for base checkpoints, deltas and data files.

Layout::

    magic      8 bytes  b"PEFTTTS1"
    kind       u8       0 = base, 1 = delta, 2 = data
    base_sha   32 bytes (delta only) SHA-256 of the base checkpoint file
    count      u32
    count x    name_len u16, name utf-8, dtype u8 (0 = f32, 1 = f64), rank u8,
               dims u32 * rank, row-major data
    cfg_len    u32, then cfg_len bytes of UTF-8 JSON

Everything is little-endian, so identical content yields identical bytes everywhere.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

import numpy as np

MAGIC = b"PEFTTTS1"
KIND_BASE = 0
KIND_DELTA = 1
KIND_DATA = 2

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
# keyed by (kind, itemsize) so either byte order is accepted on input
_CODES = {("f", 4): 0, ("f", 8): 1}


class CheckpointError(ValueError):
    pass


class IncompatibleDeltaError(CheckpointError):
    """The delta was exported against a different base checkpoint."""


@dataclass
class Checkpoint:
    kind: int
    tensors: "OrderedDict[str, np.ndarray]"
    config: Dict[str, Any] = field(default_factory=dict)
    base_sha256: Optional[bytes] = None


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(
    tensors: Mapping[str, np.ndarray],
    kind: int,
    config: Optional[Dict[str, Any]] = None,
    base_sha256: Optional[bytes] = None,
) -> bytes:
    if kind not in (KIND_BASE, KIND_DELTA, KIND_DATA):
        raise CheckpointError(f"unknown checkpoint kind {kind}")
    if kind == KIND_DELTA:
        if base_sha256 is None or len(base_sha256) != 32:
            raise CheckpointError("delta checkpoints need a 32-byte base SHA-256")
    elif base_sha256 is not None:
        raise CheckpointError("only delta checkpoints carry a base checksum")

    parts = [MAGIC, struct.pack("<B", kind)]
    if kind == KIND_DELTA:
        parts.append(bytes(base_sha256))
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value)
        code = _CODES.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = _canonical_json(config or {})
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if bytes(r.take(8)) != MAGIC:
        raise CheckpointError("bad magic; not a PEFTTTS1 file")
    (kind,) = r.unpack("<B")
    if kind not in (KIND_BASE, KIND_DELTA, KIND_DATA):
        raise CheckpointError(f"unknown checkpoint kind {kind}")
    base_sha = bytes(r.take(32)) if kind == KIND_DELTA else None
    (count,) = r.unpack("<I")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = bytes(r.take(name_len)).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dtype = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(n * dtype.itemsize)
        arr = np.frombuffer(data, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    (cfg_len,) = r.unpack("<I")
    config = json.loads(bytes(r.take(cfg_len)).decode("utf-8"))
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after config blob")
    return Checkpoint(kind=kind, tensors=tensors, config=config, base_sha256=base_sha)


def sha256(buf: bytes) -> bytes:
    return hashlib.sha256(buf).digest()


def write_atomic(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        # mkstemp creates 0600; give the final file the usual umask-derived mode
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_file(path: str) -> "tuple[Checkpoint, bytes]":
    with open(path, "rb") as f:
        raw = f.read()
    return loads(raw), raw
