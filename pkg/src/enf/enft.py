"""ENFT binary container: named arrays and blobs in one little-endian file.

Layout: magic ``ENFT``, u32 version, u32 entry count, then per entry a
u32 name length, the UTF-8 name, a u8 dtype tag (0=f32, 1=f64, 2=raw u8
blob), a u32 rank, one u64 per dimension, and the payload.  Checkpoints,
latent files, and classifier weights all ride on this format.
"""

from __future__ import annotations

import struct
from typing import Dict, Union

import numpy as np

MAGIC = b"ENFT"
VERSION = 1

_TAG_F32 = 0
_TAG_F64 = 1
_TAG_BLOB = 2

_TAG_BY_DTYPE = {np.dtype(np.float32): _TAG_F32, np.dtype(np.float64): _TAG_F64}
_DTYPE_BY_TAG = {_TAG_F32: np.dtype("<f4"), _TAG_F64: np.dtype("<f8")}

Entry = Union[np.ndarray, bytes]


class FormatError(Exception):
    """Malformed or incompatible ENFT file."""


def write_enft(path, entries: Dict[str, Entry]) -> None:
    """Write named float arrays and byte blobs to ``path``."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        if isinstance(value, (bytes, bytearray)):
            payload = bytes(value)
            chunks.append(struct.pack("<BI", _TAG_BLOB, 1))
            chunks.append(struct.pack("<Q", len(payload)))
            chunks.append(payload)
        else:
            arr = np.ascontiguousarray(value)
            if arr.dtype not in _TAG_BY_DTYPE:
                raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
            tag = _TAG_BY_DTYPE[arr.dtype]
            chunks.append(struct.pack("<BI", tag, arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def pull(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated file: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.blob) - self.pos}"
            )
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.pull(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.pull(8))[0]

    def u8(self) -> int:
        return self.pull(1)[0]


def read_enft(path) -> Dict[str, Entry]:
    """Read an ENFT file back into a dict of arrays/blobs."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.pull(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not an ENFT file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: version mismatch, file has {version}, reader supports {VERSION}")
    count = r.u32()
    entries: Dict[str, Entry] = {}
    for _ in range(count):
        name = r.pull(r.u32()).decode("utf-8")
        tag = r.u8()
        rank = r.u32()
        dims = [r.u64() for _ in range(rank)]
        if tag == _TAG_BLOB:
            if rank != 1:
                raise FormatError(f"entry {name!r}: blob must have rank 1, got {rank}")
            entries[name] = r.pull(dims[0])
        elif tag in _DTYPE_BY_TAG:
            dtype = _DTYPE_BY_TAG[tag]
            n_items = 1
            for d in dims:
                n_items *= d
            raw = r.pull(n_items * dtype.itemsize)
            entries[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        else:
            raise FormatError(f"entry {name!r}: unknown dtype byte {tag}")
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes after last entry")
    return entries
