"""Readers and writers for ``.mten`` tensors and CSV matrices."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTEN1\0"


def write_mten(path, t) -> None:
    """Write a dense tensor: magic, u32 mode count, u32 extents, f64 entries (mode 0 fastest)."""
    arr = np.asarray(t, dtype=np.float64)
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    body = arr.astype("<f8").tobytes(order="F")
    Path(path).write_bytes(header + body)


def read_mten(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an .mten file")
    offset = len(MAGIC)
    try:
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated header") from exc
    offset += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: expected {count} entries for dims {dims}")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return np.asfortranarray(values.reshape(dims, order="F").astype(np.float64))


def write_matrix_csv(path, mat) -> None:
    """Row-major CSV whose header row carries the shape as ``rows,cols``."""
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    lines = [f"{mat.shape[0]},{mat.shape[1]}"]
    lines += [",".join(repr(float(x)) for x in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(x) for x in lines[0].split(","))
        body = [[float(x) for x in ln.split(",")] for ln in lines[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: malformed matrix CSV") from exc
    mat = np.array(body, dtype=np.float64).reshape(rows, cols) if rows * cols else np.zeros((rows, cols))
    if len(body) != rows or any(len(r) != cols for r in body):
        raise ValueError(f"{path}: header says {rows}x{cols} but body disagrees")
    return mat


def read_vector(path) -> np.ndarray:
    """Observation vector from ``.mten`` or matrix CSV (any shape, flattened)."""
    path = Path(path)
    if path.suffix == ".mten":
        return read_mten(path).ravel(order="F")
    return read_matrix_csv(path).ravel()
