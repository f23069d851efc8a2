"""Little-endian sectioned binary container used by the body and checkpoint files.

Layout (all integers little-endian):

    magic        5 bytes, e.g. b"GAVB\\0" / b"GAVC\\0"
    version      u16
    n_sections   u32
    sections     repeated:
        name_len   u16
        name       utf-8 bytes
        dtype_len  u8
        dtype      numpy dtype string, e.g. "<f8"
        ndim       u8
        shape      u64 * ndim
        nbytes     u64
        payload    raw array bytes (C order)
        crc        u32 crc32 of payload

Writers emit sections in insertion order, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptSection, ParseError, VersionMismatch


def write_container(path, magic: bytes, version: int, sections: dict[str, np.ndarray]) -> None:
    if len(magic) != 5:
        raise ValueError("magic must be exactly 5 bytes")
    blobs = [magic, struct.pack('<HI', version, len(sections))]
    for name, arr in sections.items():
        arr = np.ascontiguousarray(arr)
        name_b = name.encode('utf-8')
        dtype_b = arr.dtype.str.encode('ascii')
        payload = arr.tobytes()
        blobs.append(struct.pack('<H', len(name_b)) + name_b)
        blobs.append(struct.pack('<B', len(dtype_b)) + dtype_b)
        blobs.append(struct.pack('<B', arr.ndim) + struct.pack(f'<{arr.ndim}Q', *arr.shape))
        blobs.append(struct.pack('<Q', len(payload)))
        blobs.append(payload)
        blobs.append(struct.pack('<I', zlib.crc32(payload)))
    tmp = Path(str(path) + '.tmp')
    tmp.write_bytes(b''.join(blobs))
    tmp.replace(path)


def read_container(path, magic: bytes, expect_version: int) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 11 or data[:5] != magic:
        raise ParseError(f"{path}: bad magic, expected {magic!r}")
    version, n_sections = struct.unpack_from('<HI', data, 5)
    if version != expect_version:
        raise VersionMismatch(f"{path}: file version {version}, expected {expect_version}")
    off = 11
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(n_sections):
            (name_len,) = struct.unpack_from('<H', data, off)
            off += 2
            name = data[off:off + name_len].decode('utf-8')
            off += name_len
            (dtype_len,) = struct.unpack_from('<B', data, off)
            off += 1
            dtype = np.dtype(data[off:off + dtype_len].decode('ascii'))
            off += dtype_len
            (ndim,) = struct.unpack_from('<B', data, off)
            off += 1
            shape = struct.unpack_from(f'<{ndim}Q', data, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from('<Q', data, off)
            off += 8
            payload = data[off:off + nbytes]
            if len(payload) != nbytes:
                raise CorruptSection(f"{path}: section {name!r} truncated")
            off += nbytes
            (crc,) = struct.unpack_from('<I', data, off)
            off += 4
            if zlib.crc32(payload) != crc:
                raise CorruptSection(f"{path}: section {name!r} failed CRC check")
            out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    except struct.error as exc:
        raise CorruptSection(f"{path}: truncated section table ({exc})") from exc
    return out
