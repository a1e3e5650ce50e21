"""Feature matrix files.

Binary layout (little-endian): ``b"FEAT"``, u32 element size (4 or 8),
u64 rows, u64 cols, then row-major float data. Files ending in ``.txt``,
``.csv`` or ``.tsv`` are read and written as delimited text instead.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FEAT"
_HEADER = struct.Struct("<4sIQQ")
TEXT_SUFFIXES = {".txt": None, ".csv": ",", ".tsv": "\t"}


def _is_text(path: Path) -> bool:
    return path.suffix.lower() in TEXT_SUFFIXES


def read_features(path) -> np.ndarray:
    path = Path(path)
    if _is_text(path):
        delim = TEXT_SUFFIXES[path.suffix.lower()]
        return np.atleast_2d(np.loadtxt(path, delimiter=delim, dtype=np.float64))
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: too short for a feature header")
    magic, size, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if size not in (4, 8):
        raise ValueError(f"{path}: unsupported element size {size}")
    expected = _HEADER.size + rows * cols * size
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype=f"<f{size}", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def write_features(path, matrix, element_size: int = 8) -> None:
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if _is_text(path):
        delim = TEXT_SUFFIXES[path.suffix.lower()] or " "
        np.savetxt(path, matrix, delimiter=delim, fmt="%.17g")
        return
    if element_size not in (4, 8):
        raise ValueError(f"element size must be 4 or 8, got {element_size}")
    rows, cols = matrix.shape
    header = _HEADER.pack(MAGIC, element_size, rows, cols)
    path.write_bytes(header + np.ascontiguousarray(matrix, dtype=f"<f{element_size}").tobytes())
