"""The "PTK1" tensor container.

Layout (little-endian): the 4 magic bytes ``PTK1`` followed by records until
end of file. Each record is ``u32`` name length, UTF-8 name, ``u32`` rank,
``rank`` x ``u64`` dims and ``prod(dims)`` x ``f64`` values.

Free-form metadata is stored as one extra record whose name is
``__meta__:`` followed by compact sorted JSON, with rank 1 and dim 0.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import Mapping, Optional, Union

import numpy as np

from ..errors import FormatError

MAGIC = b"PTK1"
META_PREFIX = "__meta__:"

PathLike = Union[str, os.PathLike]


def dumps(tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    items = list(tensors.items())
    if meta is not None:
        items.append((META_PREFIX + json.dumps(meta, sort_keys=True, separators=(",", ":")),
                      np.zeros(0)))
    for name, value in items:
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple:
    """Parse a container; returns (dict of name -> array, metadata dict)."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("missing PTK1 magic")
    pos, tensors, meta = 4, {}, {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated PTK1 record")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        if name.startswith(META_PREFIX):
            meta.update(json.loads(name[len(META_PREFIX):]))
        else:
            tensors[name] = data
    return tensors, meta


def save(path: PathLike, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path: PathLike) -> tuple:
    with open(path, "rb") as fh:
        return loads(fh.read())
