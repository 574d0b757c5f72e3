"""Binary checkpoint (``MMHC``) and sparse-matrix (``MMHS``) file formats.

Checkpoint layout, little-endian::

    b"MMHC" | version u32
    4 x ( name_len u32 | name utf-8 | rows u64 | cols u64 | rows*cols f64 )
    meta_len u64 | meta JSON utf-8  (model config and digests)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import canonical_json
from .data import DataError
from .linalg import SparseCsr
from .model import TABLE_NAMES, ModelParams

CHECKPOINT_MAGIC = b"MMHC"
CHECKPOINT_VERSION = 1
SPARSE_MAGIC = b"MMHS"
SPARSE_VERSION = 1


def write_checkpoint(path, params: ModelParams, meta: dict):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in TABLE_NAMES:
        table = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<QQ", *table.shape))
        chunks.append(table.tobytes())
    raw_meta = canonical_json(meta).encode("utf-8")
    chunks.append(struct.pack("<Q", len(raw_meta)) + raw_meta)
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    tables = {}
    try:
        for _ in TABLE_NAMES:
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode("utf-8")
            off += n
            rows, cols = struct.unpack_from("<QQ", raw, off)
            off += 16
            size = rows * cols * 8
            if off + size > len(raw):
                raise DataError(f"{path}: truncated table {name!r}")
            tables[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols,
                                         offset=off).reshape(rows, cols).astype(np.float64)
            off += size
        (meta_len,) = struct.unpack_from("<Q", raw, off)
        off += 8
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    if set(tables) != set(TABLE_NAMES):
        raise DataError(f"{path}: unexpected tables {sorted(tables)}")
    return ModelParams(**tables), meta


def write_sparse(path, S: SparseCsr):
    header = SPARSE_MAGIC + struct.pack("<IQQQ", SPARSE_VERSION, S.rows, S.cols, S.nnz)
    body = (np.ascontiguousarray(S.indptr, dtype="<i8").tobytes()
            + np.ascontiguousarray(S.indices, dtype="<i8").tobytes()
            + np.ascontiguousarray(S.data, dtype="<f8").tobytes())
    Path(path).write_bytes(header + body)


def read_sparse(path) -> SparseCsr:
    raw = Path(path).read_bytes()
    if raw[:4] != SPARSE_MAGIC:
        raise DataError(f"{path}: not a sparse matrix file")
    version, rows, cols, nnz = struct.unpack_from("<IQQQ", raw, 4)
    if version != SPARSE_VERSION:
        raise DataError(f"{path}: unsupported sparse format version {version}")
    off = 4 + 28
    expected = off + 8 * (rows + 1) + 16 * nnz
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} does not match header ({expected})")
    indptr = np.frombuffer(raw, "<i8", rows + 1, off).astype(np.int64)
    off += 8 * (rows + 1)
    indices = np.frombuffer(raw, "<i8", nnz, off).astype(np.int64)
    off += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).astype(np.float64)
    return SparseCsr((rows, cols), indptr, indices, data)
