"""MMTF feature files.

Little-endian layout: magic "MMTF", then u32 version (1), layout (0 pooled,
1 spatial), rows, C, H, W (H = W = 1 when pooled), then rows x C x H x W
float32 values. Values are widened to float64 on load.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from mmtprobe._core import FeatureFormatError
from mmtprobe._features import FeatureSet

logger = logging.getLogger(__name__)

MAGIC = b"MMTF"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_LAYOUT_CODES = {"pooled": 0, "spatial": 1}


def write_features(path: str | Path, fs: FeatureSet) -> None:
    """Write a feature set.

    Values are stored as float32, so float64 input keeps about seven
    significant digits. Finite values beyond the float32 range are rejected.
    """
    with np.errstate(over="ignore"):
        narrowed = fs.data.astype("<f4")
    overflow = np.flatnonzero(np.isfinite(fs.data) & ~np.isfinite(narrowed))
    if overflow.size:
        msg = f"{overflow.size} feature values exceed the float32 range"
        raise FeatureFormatError(msg, _HEADER.size + 4 * int(overflow[0]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = fs.spatial_shape
    header = _HEADER.pack(MAGIC, VERSION, _LAYOUT_CODES[fs.layout], fs.rows, fs.channels, h, w)
    with path.open("wb") as f:
        f.write(header)
        f.write(narrowed.tobytes())


def read_features(buffer: bytes) -> FeatureSet:
    """Parse MMTF bytes."""
    if len(buffer) < _HEADER.size:
        msg = f"Header needs {_HEADER.size} bytes, file has {len(buffer)}"
        raise FeatureFormatError(msg, len(buffer))
    magic, version, layout_code, rows, c, h, w = _HEADER.unpack_from(buffer)
    if magic != MAGIC:
        msg = f"Bad magic {magic!r}, expected {MAGIC!r}"
        raise FeatureFormatError(msg, 0)
    if version != VERSION:
        msg = f"Unsupported version {version}"
        raise FeatureFormatError(msg, 4)
    if layout_code not in (0, 1):
        msg = f"Unknown layout code {layout_code}"
        raise FeatureFormatError(msg, 8)
    if c == 0 or h == 0 or w == 0:
        msg = f"Zero dimension in C x H x W = {c} x {h} x {w}"
        raise FeatureFormatError(msg, 16)
    if layout_code == 0 and (h, w) != (1, 1):
        msg = f"Pooled features must have H = W = 1, got {h} x {w}"
        raise FeatureFormatError(msg, 20)

    expected = _HEADER.size + 4 * rows * c * h * w
    if len(buffer) < expected:
        msg = f"Short read: {expected} bytes expected, file ends early"
        raise FeatureFormatError(msg, len(buffer))
    if len(buffer) > expected:
        msg = f"{len(buffer) - expected} trailing bytes after the data"
        raise FeatureFormatError(msg, expected)

    values = np.frombuffer(buffer, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if layout_code == 0:
        return FeatureSet(values.reshape(rows, c), "pooled")
    return FeatureSet(values.reshape(rows, c, h, w), "spatial")


def load_features(path: str | Path) -> FeatureSet:
    """Read an MMTF file."""
    path = Path(path)
    fs = read_features(path.read_bytes())
    logger.debug(
        "Loaded %d %s feature rows of depth %d from %s", fs.rows, fs.layout, fs.channels, path
    )
    return fs
