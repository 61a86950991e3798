"""Sectioned binary tensor files (checkpoints).

Layout, little-endian: magic ``MIGC``, u32 version, u32 section count, then
per section: u16 name length, utf-8 name, u8 dtype code, u8 ndim, u32 dims,
u64 payload bytes, payload, u32 CRC32 of the payload.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagic, CorruptSection, VersionMismatch

CKPT_MAGIC = b"MIGC"
CKPT_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_sections(sections: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    chunks = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"section {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        chunks.append(struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_sections(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    if len(data) < 12:
        raise CorruptSection(f"{path}: header cut short")
    _, version, count = struct.unpack_from("<4sII", data)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CKPT_VERSION}")
    pos, out = 12, {}

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CorruptSection(f"{path}: truncated in section {len(out)}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    for _ in range(count):
        (n,) = take("<H")
        name = bytes(take(f"<{n}s")[0]).decode()
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise CorruptSection(f"{path}: section {name!r} has unknown dtype {code}")
        dims = take(f"<{ndim}I")
        (nbytes,) = take("<Q")
        if pos + nbytes + 4 > len(data):
            raise CorruptSection(f"{path}: section {name!r} truncated")
        payload = data[pos:pos + nbytes]
        pos += nbytes
        (crc,) = take("<I")
        if crc != zlib.crc32(payload):
            raise CorruptSection(f"{path}: section {name!r} fails its checksum")
        arr = np.frombuffer(payload, dtype=_DTYPES[code])
        if arr.size != int(np.prod(dims)):
            raise CorruptSection(f"{path}: section {name!r} size does not match its shape")
        out[name] = arr.reshape(dims).copy()
    if pos != len(data):
        raise CorruptSection(f"{path}: {len(data) - pos} trailing bytes")
    return out
