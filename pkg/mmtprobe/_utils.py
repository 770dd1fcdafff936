"""Data validation and small helpers used by the experiment runner and the CLI."""

import hashlib
import os
import struct
import tomllib
from pathlib import Path
from typing import Any

from mmtprobe._core import DataPaths, DataSplit, FeatureFormatError

THREADS_VARIABLE = "MMTPROBE_THREADS"


def file_sha256(path: str | Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def count_lines(path: str | Path) -> int:
    """Number of lines of a text file."""
    with Path(path).open("rb") as f:
        return sum(1 for _ in f)


def feature_rows(path: str | Path) -> int:
    """Row count from the header of an MMTF file."""
    with Path(path).open("rb") as f:
        header = f.read(28)
    if len(header) < 28 or header[:4] != b"MMTF":
        msg = f"{path} is not an MMTF feature file"
        raise FeatureFormatError(msg, 0)
    return struct.unpack_from("<I", header, 12)[0]


def _validate_split(name: str, split: DataSplit) -> None:
    for path in (split.src, split.tgt, split.features, split.annotations):
        if path is not None and not Path(path).is_file():
            msg = f"{name}: {path} does not exist."
            raise FileNotFoundError(msg)
    n_src, n_tgt = count_lines(split.src), count_lines(split.tgt)
    if n_src != n_tgt:
        msg = f"{name}: {split.src} has {n_src} lines but {split.tgt} has {n_tgt}."
        raise ValueError(msg)
    if split.features is not None and (rows := feature_rows(split.features)) != n_src:
        msg = f"{name}: {split.features} has {rows} rows for {n_src} sentences."
        raise ValueError(msg)


def validate_data_files(data: DataPaths) -> None:
    """Check that every referenced file exists and line counts align."""
    for i, split in enumerate(data.train):
        _validate_split(f"train[{i}]", split)
    _validate_split("dev", data.dev)
    _validate_split("test", data.test)
    for path in (data.color_lexicon, data.target_color_lexicon):
        if path is not None and not Path(path).is_file():
            msg = f"Lexicon {path} does not exist."
            raise FileNotFoundError(msg)


def input_hashes(data: DataPaths) -> dict[str, str]:
    """SHA-256 of every input file, keyed by path."""
    paths = []
    for split in [*data.train, data.dev, data.test]:
        paths.extend(p for p in (split.src, split.tgt, split.features, split.annotations) if p)
    paths.extend(p for p in (data.color_lexicon, data.target_color_lexicon) if p)
    return {str(p): file_sha256(p) for p in paths}


def resolve_threads(configured: int | None = None) -> int:
    """Worker count: MMTPROBE_THREADS if set, else the configured value, else 1."""
    value = os.environ.get(THREADS_VARIABLE)
    if value:
        try:
            threads = int(value)
        except ValueError:
            msg = f"{THREADS_VARIABLE} must be an integer, got {value!r}."
            raise ValueError(msg) from None
        return max(1, threads)
    return configured or 1


def parse_override(assignment: str) -> tuple[str, Any]:
    """Split `dotted.key=value`; the value is read as a TOML scalar or array.

    Values that are not valid TOML are kept as plain strings.
    """
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        msg = f"Overrides must look like dotted.key=value, got {assignment!r}."
        raise ValueError(msg)
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip(), value
