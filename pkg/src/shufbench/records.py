"""Binary layout of `.shfd` dataset files.

Header (little-endian, 32 bytes)::

    0   8s  magic "SHFBNCH1"
    8   B   format (0 = dense, 1 = sparse)
    9   Q   num_instances
    17  I   num_features
    21  B   label_width (always 4)
    22  Q   created_seed
    30  H   data_offset (0 means records start right after the header)

Dense record:  i32 label, F x f32 values.
Sparse record: i32 label, u32 nnz, nnz x (u32 index, f32 value).
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SHFBNCH1"
HEADER_SIZE = 32
LABEL_WIDTH = 4

_HEADER = struct.Struct("<8sBQIBQH")
_LABEL = struct.Struct("<i")
_SPARSE_PREFIX = struct.Struct("<iI")
PAIR_DTYPE = np.dtype([("index", "<u4"), ("value", "<f4")])


class DatasetError(ValueError):
    """Malformed or truncated dataset bytes."""


class Format(enum.IntEnum):
    DENSE = 0
    SPARSE = 1

    @classmethod
    def parse(cls, value) -> "Format":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown format {value!r}") from None
        return cls(value)


@dataclass(frozen=True)
class DatasetHeader:
    format: Format
    num_instances: int
    num_features: int
    created_seed: int = 0
    label_width: int = LABEL_WIDTH
    data_offset: int = HEADER_SIZE

    def __post_init__(self):
        if self.num_instances < 1 or self.num_features < 1:
            raise DatasetError("header requires N >= 1 and F >= 1")
        if self.label_width != LABEL_WIDTH:
            raise DatasetError(f"unsupported label width {self.label_width}")
        if not HEADER_SIZE <= self.data_offset <= 0xFFFF:
            raise DatasetError(f"bad data offset {self.data_offset}")

    @property
    def dense_record_size(self) -> int:
        return self.label_width + 4 * self.num_features

    def pack(self) -> bytes:
        stored_offset = 0 if self.data_offset == HEADER_SIZE else self.data_offset
        raw = _HEADER.pack(MAGIC, int(self.format), self.num_instances,
                           self.num_features, self.label_width,
                           self.created_seed, stored_offset)
        return raw + b"\x00" * (self.data_offset - len(raw))

    @classmethod
    def unpack(cls, buf: bytes) -> "DatasetHeader":
        if len(buf) < HEADER_SIZE:
            raise DatasetError("truncated header")
        magic, fmt, n, f, lw, seed, off = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise DatasetError(f"bad magic {magic!r}")
        try:
            fmt = Format(fmt)
        except ValueError:
            raise DatasetError(f"unknown format byte {fmt}") from None
        return cls(fmt, n, f, seed, lw, off or HEADER_SIZE)


class Record:
    """One labeled instance. `indices` is None for dense records."""

    __slots__ = ("instance_id", "label", "values", "indices")

    def __init__(self, instance_id: int, label: int, values, indices=None):
        self.instance_id = int(instance_id)
        self.label = int(label)
        self.values = np.asarray(values, dtype=np.float32)
        self.indices = None if indices is None else np.asarray(indices, dtype=np.uint32)

    @property
    def is_sparse(self) -> bool:
        return self.indices is not None

    @property
    def nnz(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        if (self.instance_id, self.label, self.is_sparse) != (other.instance_id, other.label, other.is_sparse):
            return False
        if self.is_sparse and not np.array_equal(self.indices, other.indices):
            return False
        return np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"Record(id={self.instance_id}, label={self.label}, {kind}, nnz={self.nnz})"


def encode_record(rec: Record) -> bytes:
    if rec.indices is None:
        return _LABEL.pack(rec.label) + rec.values.astype("<f4", copy=False).tobytes()
    pairs = np.empty(len(rec.values), dtype=PAIR_DTYPE)
    pairs["index"] = rec.indices
    pairs["value"] = rec.values
    return _SPARSE_PREFIX.pack(rec.label, len(pairs)) + pairs.tobytes()


def record_length_at(buf, pos: int, fmt: Format, num_features: int) -> int | None:
    """Serialized length of the record starting at `pos`, or None if `buf` is too short to tell."""
    if fmt == Format.DENSE:
        return LABEL_WIDTH + 4 * num_features
    if len(buf) - pos < _SPARSE_PREFIX.size:
        return None
    _, nnz = _SPARSE_PREFIX.unpack_from(buf, pos)
    if nnz > num_features:
        raise DatasetError(f"corrupt record length: nnz={nnz} > F={num_features}")
    return _SPARSE_PREFIX.size + 8 * nnz


def decode_record(buf, fmt: Format, num_features: int, instance_id: int, pos: int = 0) -> Record:
    length = record_length_at(buf, pos, fmt, num_features)
    if length is None or len(buf) - pos < length:
        raise DatasetError(f"truncated record {instance_id}")
    if fmt == Format.DENSE:
        (label,) = _LABEL.unpack_from(buf, pos)
        values = np.frombuffer(buf, dtype="<f4", count=num_features, offset=pos + LABEL_WIDTH)
        if not isinstance(buf, bytes):
            values = values.copy()  # mutable buffers get reused by the caller
        return Record(instance_id, label, values)
    label, nnz = _SPARSE_PREFIX.unpack_from(buf, pos)
    pairs = np.frombuffer(buf, dtype=PAIR_DTYPE, count=nnz, offset=pos + _SPARSE_PREFIX.size)
    idx = pairs["index"].astype(np.uint32)
    if nnz and (idx[-1] >= num_features or np.any(np.diff(idx.astype(np.int64)) <= 0)):
        raise DatasetError(f"record {instance_id}: feature indices not strictly increasing below F")
    return Record(instance_id, label, pairs["value"].astype(np.float32), idx)
