"""OTTK binary tensor container.

Layout (little-endian)::

    b"OTTK" | u32 version=1 | u8 dtype (1 = f64) | u8 rank | u64 shape[rank] | f64 payload

Sparse matrices are stored as three OTTK tensors (offsets, indices,
values); integer arrays are written as f64, which is exact below 2**53.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .sparse import SparseMatrix

MAGIC = b"OTTK"
VERSION = 1
DTYPE_F64 = 1


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.array(array, dtype="<f8", order="C")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic; not an OTTK tensor")
    if len(buf) < 10:
        raise FormatError("truncated header")
    version, dtype, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported OTTK version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    offset = 10 + 8 * rank
    shape = struct.unpack_from(f"<{rank}Q", buf, 10)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise FormatError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_tensor(array, path):
    Path(path).write_bytes(encode(array))


def load_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_sparse(mat: SparseMatrix, directory, stem):
    """Write ``{stem}.offsets.ottk``, ``.indices.ottk``, ``.values.ottk``; returns the shape record."""
    directory = Path(directory)
    save_tensor(mat.offsets.astype(np.float64), directory / f"{stem}.offsets.ottk")
    save_tensor(mat.indices.astype(np.float64), directory / f"{stem}.indices.ottk")
    save_tensor(mat.values, directory / f"{stem}.values.ottk")
    return {"stem": stem, "n_rows": mat.n_rows, "n_cols": mat.n_cols}


def load_sparse(directory, record) -> SparseMatrix:
    directory = Path(directory)
    stem = record["stem"]
    offsets = load_tensor(directory / f"{stem}.offsets.ottk").astype(np.int64)
    indices = load_tensor(directory / f"{stem}.indices.ottk").astype(np.int64)
    values = load_tensor(directory / f"{stem}.values.ottk")
    return SparseMatrix(record["n_rows"], record["n_cols"], offsets, indices, values)


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
