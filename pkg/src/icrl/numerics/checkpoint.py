"""Flat binary parameter checkpoints.

Layout (all integers little-endian u32)::

    b"ICRL" | version | header_len | header (UTF-8 JSON) | n_tensors |
    per tensor: name_len | name | rank | dims... | float32 data

Tensors are written in the mapping's iteration order.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"ICRL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dumps(params: dict[str, Tensor], header: dict | None = None) -> bytes:
    buf = io.BytesIO()
    _write(buf, params, header or {})
    return buf.getvalue()


def _write(fh: BinaryIO, params: dict[str, Tensor], header: dict) -> None:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    fh.write(MAGIC + _u32(VERSION) + _u32(len(hdr)) + hdr + _u32(len(params)))
    for name, t in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        fh.write(_u32(len(raw)) + raw + _u32(arr.ndim))
        fh.write(b"".join(_u32(d) for d in arr.shape))
        fh.write(arr.tobytes())


def save(path, params: dict[str, Tensor], header: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, header))


def loads(blob: bytes, requires_grad: bool = True) -> tuple[dict[str, Tensor], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(bytes(take(u32())).decode())
    params = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode()
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=requires_grad, name=name)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return params, header


def load(path, requires_grad: bool = True) -> tuple[dict[str, Tensor], dict]:
    return loads(Path(path).read_bytes(), requires_grad=requires_grad)


def digest(path_or_blob) -> str:
    blob = path_or_blob if isinstance(path_or_blob, bytes) else Path(path_or_blob).read_bytes()
    return hashlib.sha256(blob).hexdigest()[:16]
