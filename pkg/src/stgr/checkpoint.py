"""Flat binary parameter container.

Layout (all integers little-endian)::

    magic    8 bytes  b"STGRCKPT"
    version  u32
    seed     u64
    meta     u32 length + UTF-8 JSON (may be empty object)
    count    u32
    entries  count x { u16 name length, name, u8 ndim, ndim x u64 dims,
                       prod(dims) x f64 little-endian }
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"STGRCKPT"
FORMAT_VERSION = 1


def dumps(arrays: dict[str, np.ndarray], seed: int = 0, meta: dict | None = None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, int(seed) & 0xFFFFFFFFFFFFFFFF),
             struct.pack("<I", len(meta_blob)), meta_blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], int, dict]:
    """Inverse of :func:`dumps`; returns ``(arrays, seed, meta)``."""
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8, "magic")) != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    version, seed = struct.unpack("<IQ", take(12, "header"))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    try:
        meta = json.loads(bytes(take(meta_len, "meta")).decode())
    except ValueError as exc:
        raise ParseError(f"bad checkpoint metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode()
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} shape"))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(8 * n, f"{name} data")), dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64)
    if pos != len(view):
        raise ParseError("trailing bytes after last checkpoint entry")
    return arrays, seed, meta


def atomic_write(path, data: bytes | str) -> Path:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save(path, arrays: dict[str, np.ndarray], seed: int = 0, meta: dict | None = None) -> Path:
    return atomic_write(path, dumps(arrays, seed, meta))


def load(path) -> tuple[dict[str, np.ndarray], int, dict]:
    return loads(Path(path).read_bytes())
