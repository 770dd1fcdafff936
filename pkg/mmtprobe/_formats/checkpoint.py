"""MMTC checkpoint files: a JSON header followed by a named float64 tensor table.

Little-endian layout:

    "MMTC" | u32 version | u32 header length | header (UTF-8 JSON)
    per tensor, sorted by name:
        u32 name length | name (UTF-8) | u32 ndim | u32 dims... | float64 values

The header is written with sorted keys so that identical models produce
identical files.
"""

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from mmtprobe._core import FeatureFormatError

MAGIC = b"MMTC"
VERSION = 1
_U32 = struct.Struct("<I")


def write_checkpoint(
    path: str | Path,
    header: dict[str, Any],
    tensors: dict[str, np.ndarray],
) -> None:
    """Write a header and named tensors."""
    header = {**header, "tensor_count": len(tensors)}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(header_bytes)), header_bytes]
    for name in sorted(tensors):
        values = np.asarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        chunks.append(_U32.pack(len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(_U32.pack(values.ndim))
        chunks.extend(_U32.pack(d) for d in values.shape)
        chunks.append(values.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


class _Reader:
    """Cursor over a byte buffer that reports the offset of short reads."""

    def __init__(self, buffer: bytes) -> None:
        self.buffer = buffer
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buffer):
            msg = f"Short read of {what}: need {n} bytes, {len(self.buffer) - self.offset} left"
            raise FeatureFormatError(msg, self.offset)
        chunk = self.buffer[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.read(4, what))[0]


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a header and named tensors."""
    reader = _Reader(Path(path).read_bytes())
    magic = reader.read(4, "magic")
    if magic != MAGIC:
        msg = f"Bad magic {magic!r}, expected {MAGIC!r}"
        raise FeatureFormatError(msg, 0)
    version = reader.u32("version")
    if version != VERSION:
        msg = f"Unsupported checkpoint version {version}"
        raise FeatureFormatError(msg, 4)
    header_start = reader.offset
    header_bytes = reader.read(reader.u32("header length"), "header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        msg = f"Header is not valid JSON: {e}"
        raise FeatureFormatError(msg, header_start) from e

    tensors: dict[str, np.ndarray] = {}
    for _ in range(header.get("tensor_count", 0)):
        name_start = reader.offset
        name = reader.read(reader.u32("name length"), "tensor name").decode("utf-8")
        if name in tensors:
            msg = f"Duplicate tensor {name!r}"
            raise FeatureFormatError(msg, name_start)
        ndim = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"shape of {name}") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.read(8 * count, f"values of {name}"), dtype="<f8")
        tensors[name] = values.astype(np.float64).reshape(shape)
    if reader.offset != len(reader.buffer):
        msg = f"{len(reader.buffer) - reader.offset} trailing bytes after the tensor table"
        raise FeatureFormatError(msg, reader.offset)
    return header, tensors
