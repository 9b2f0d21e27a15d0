"""Bit-exact parameter checkpoints.

Layout (all little-endian): b"DPSM", u32 version, u32 entry count, then per
entry u16 name length, UTF-8 name, u8 rank, rank x u64 dims, f64 data;
finally u32 CRC32 of every preceding byte.
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"DPSM"
VERSION = 1


def encode(params) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(params))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode(blob: bytes):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a DPSM checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, params = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
            params[name] = arr.astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes after the last checkpoint entry")
    return params


def save_checkpoint(path, params):
    Path(path).write_bytes(encode(params))


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
