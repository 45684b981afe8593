"""Flat binary checkpoint format.

Layout (all integers little-endian)::

    b"SESG"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u32 rank, u64 * rank axis lengths,
        float64 payload (little-endian, row-major)
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ParseError

MAGIC = b"SESG"
VERSION = 1


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ParseError("not a SESG checkpoint (bad magic)")
    if len(blob) < 8:
        raise ParseError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            record = len(out)
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise ParseError(f"record {record} ({name!r}) truncated")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
            pos = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint at byte {pos}: {exc}") from None
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> str:
    """Write the checkpoint and return the sha256 hex digest of its bytes."""
    blob = dumps(arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(arrays: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(arrays)).hexdigest()
