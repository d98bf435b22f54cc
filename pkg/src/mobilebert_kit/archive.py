"""TBK1 tensor archive: a flat, self-describing container of named arrays.

Layout (all integers little-endian)::

    b"TBK1"  u64 entry_count
    per entry:
        u32 name_len, name (UTF-8)
        u8  tag_len,  dtype tag (ASCII: f64 f32 i64 i32 i8 u8)
        u64 rank, rank x u64 extents
        row-major payload
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from .errors import DomainError

MAGIC = b"TBK1"

_TAGS = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "i64": np.dtype("<i8"),
    "i32": np.dtype("<i4"),
    "i8": np.dtype("i1"),
    "u8": np.dtype("u1"),
}
_BY_DTYPE = {dt: tag for tag, dt in _TAGS.items()}


def dtype_tag(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _BY_DTYPE[np.dtype(dt)]
    except KeyError:
        raise DomainError(f"archive: unsupported dtype {arr.dtype}") from None


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        tag = dtype_tag(arr)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", len(tag)))
        buf.write(tag.encode("ascii"))
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DomainError("archive: missing TBK1 header")
    try:
        return _parse(blob)
    except (struct.error, UnicodeDecodeError) as exc:
        raise DomainError(f"archive: truncated or corrupt ({exc})") from None


def _parse(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 4
    (count,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (tlen,) = struct.unpack_from("<B", view, pos)
        pos += 1
        tag = bytes(view[pos : pos + tlen]).decode("ascii")
        pos += tlen
        if tag not in _TAGS:
            raise DomainError(f"archive: unknown dtype tag {tag!r}")
        (rank,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(blob):
            raise DomainError(f"archive: payload of {name!r} is truncated")
        arr = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
        out[name] = arr
    if pos != len(blob):
        raise DomainError("archive: trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> int:
    """Write ``entries`` to ``path``; returns the number of bytes written."""
    blob = dumps(entries)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
