"""Synthetic dataset generation, offset tables and record access."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import (HEADER_SIZE, PAIR_DTYPE, DatasetError, DatasetHeader, Format, Record,
                      decode_record, encode_record, record_length_at)
from .storage import StorageContext, StorageFile

OFFSET_ENTRY = np.dtype([("offset", "<u8"), ("length", "<u4")])


def read_header(path) -> DatasetHeader:
    with open(path, "rb") as fh:
        return DatasetHeader.unpack(fh.read(HEADER_SIZE))


def _dense_points(rng, w, n, f, margin):
    x = np.empty((n, f), dtype=np.float32)
    todo = np.arange(n)
    while len(todo):
        x[todo] = rng.standard_normal((len(todo), f), dtype=np.float32)
        score = x[todo].astype(np.float64) @ w
        todo = todo[np.abs(score) < margin]
    return x


def _sparse_point(rng, w, f, max_nnz, margin):
    while True:
        k = int(rng.integers(1, max_nnz + 1))
        idx = np.sort(rng.choice(f, size=k, replace=False)).astype(np.uint32)
        vals = rng.standard_normal(k, dtype=np.float32)
        score = float(vals.astype(np.float64) @ w[idx])
        if abs(score) >= margin:
            return idx, vals, score


def generate_synthetic(path, n: int, f: int, fmt="dense", nnz_per_record: int | None = None,
                       margin: float = 0.05, seed: int = 0, align: int | None = None) -> DatasetHeader:
    """Write a linearly separable two-class dataset.

    Labels are sign(w* . x) for a random unit vector w*; points closer than
    `margin` to the hyperplane are redrawn. Sparse records draw their nnz
    uniformly from [1, nnz_per_record]. With `align`, records start at the
    first multiple of `align` after the header.
    """
    fmt = Format.parse(fmt)
    if n < 1 or f < 1:
        raise ValueError("n and f must be >= 1")
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if fmt == Format.SPARSE:
        nnz_per_record = f if nnz_per_record is None else nnz_per_record
        if not 1 <= nnz_per_record <= f:
            raise ValueError(f"nnz per record must be in [1, {f}]")
    data_offset = HEADER_SIZE if not align else -(-HEADER_SIZE // align) * align
    header = DatasetHeader(fmt, n, f, seed, data_offset=data_offset)

    rng = np.random.default_rng(seed)
    w = rng.standard_normal(f)
    w /= np.linalg.norm(w)
    with open(path, "wb") as out:
        out.write(header.pack())
        if fmt == Format.DENSE:
            chunk = 8192
            for start in range(0, n, chunk):
                m = min(chunk, n - start)
                x = _dense_points(rng, w, m, f, margin)
                labels = np.where(x.astype(np.float64) @ w > 0, 1, -1).astype("<i4")
                rows = np.empty(m, dtype=[("label", "<i4"), ("x", "<f4", (f,))])
                rows["label"] = labels
                rows["x"] = x
                out.write(rows.tobytes())
        else:
            for i in range(n):
                idx, vals, score = _sparse_point(rng, w, f, nnz_per_record, margin)
                out.write(encode_record(Record(i, 1 if score > 0 else -1, vals, idx)))
    return header


@dataclass
class OffsetTable:
    offsets: np.ndarray  # uint64
    lengths: np.ndarray  # uint32

    def __len__(self):
        return len(self.offsets)

    def __getitem__(self, i):
        return int(self.offsets[i]), int(self.lengths[i])

    def __eq__(self, other):
        return (isinstance(other, OffsetTable) and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.lengths, other.lengths))

    @property
    def nbytes(self) -> int:
        return len(self) * OFFSET_ENTRY.itemsize

    def save(self, path):
        entries = np.empty(len(self), dtype=OFFSET_ENTRY)
        entries["offset"] = self.offsets
        entries["length"] = self.lengths
        Path(path).write_bytes(entries.tobytes())

    @classmethod
    def load(cls, path) -> "OffsetTable":
        raw = Path(path).read_bytes()
        if len(raw) % OFFSET_ENTRY.itemsize:
            raise DatasetError("offset sidecar size is not a whole number of entries")
        entries = np.frombuffer(raw, dtype=OFFSET_ENTRY)
        return cls(entries["offset"].astype(np.uint64), entries["length"].astype(np.uint32))


def dense_offset(instance_id: int, header_size: int, record_size: int) -> int:
    if record_size <= 0:
        raise ValueError("record size must be > 0")
    return header_size + instance_id * record_size


def dense_offset_table(header: DatasetHeader) -> OffsetTable:
    size = header.dense_record_size
    ids = np.arange(header.num_instances, dtype=np.uint64)
    return OffsetTable(header.data_offset + ids * np.uint64(size),
                       np.full(header.num_instances, size, dtype=np.uint32))


def sequential_stream(ctx: StorageContext, f: StorageFile, fmt: Format, num_features: int,
                      start: int, count: int | None = None, with_offsets: bool = False):
    """Decode records in file order from a page-by-page sequential scan.

    Yields Records (ids numbered from 0), or (Record, offset, length) with
    `with_offsets`. Scans to end of file unless `count` is given.
    """
    buf = bytearray()
    buf_base = 0  # file offset of buf[0]
    pos = start
    i = 0
    pages = ctx.sequential_pages(f, 0)
    exhausted = False
    while count is None or i < count:
        rel = pos - buf_base
        length = None if rel > len(buf) else record_length_at(buf, rel, fmt, num_features)
        if length is None or len(buf) - rel < length:
            chunk = next(pages, None)
            if chunk is None:
                exhausted = True
                break
            if rel > 0:
                drop = min(rel, len(buf))
                del buf[:drop]
                buf_base += drop
            buf += chunk
            continue
        rec = decode_record(buf, fmt, num_features, i, rel)
        yield (rec, pos, length) if with_offsets else rec
        pos += length
        i += 1
    if exhausted and pos - buf_base < len(buf):
        raise DatasetError(f"truncated record {i}")
    if count is not None and i < count:
        raise DatasetError(f"truncated dataset: expected {count} records, found {i}")


def build_offset_table(path, ctx: StorageContext | None = None) -> OffsetTable:
    """Scan the dataset once and record where every record starts and how long it is."""
    ctx = ctx or StorageContext()
    header = read_header(path)
    offsets = np.empty(header.num_instances, dtype=np.uint64)
    lengths = np.empty(header.num_instances, dtype=np.uint32)
    with ctx.open(path) as f:
        if f.size < header.data_offset:
            raise DatasetError("truncated header")
        stream = sequential_stream(ctx, f, header.format, header.num_features,
                                   header.data_offset, header.num_instances, with_offsets=True)
        for rec, off, length in stream:
            offsets[rec.instance_id] = off
            lengths[rec.instance_id] = length
        end = int(offsets[-1]) + int(lengths[-1])
        if end != f.size:
            raise DatasetError(f"trailing bytes after record {header.num_instances - 1}")
    return OffsetTable(offsets, lengths)


def offset_table_for(path, header: DatasetHeader, ctx: StorageContext | None = None) -> OffsetTable:
    """Arithmetic offsets for dense files, a scan (or cached sidecar) for sparse ones."""
    if header.format == Format.DENSE:
        return dense_offset_table(header)
    return build_offset_table(path, ctx)


def read_record_at(ctx: StorageContext, f: StorageFile, header: DatasetHeader,
                   entry: tuple[int, int], instance_id: int) -> Record:
    offset, length = entry
    data = ctx.positioned_read(f, offset, length)
    return decode_record(data, header.format, header.num_features, instance_id)


def load_arrays(path):
    """Whole dataset in memory, bypassing I/O accounting; for objective evaluation only.

    Returns (header, y, X) where X is a dense (N, F) array or a CSR triple
    (indptr, indices, values).
    """
    header = read_header(path)
    n, f = header.num_instances, header.num_features
    if header.format == Format.DENSE:
        rows = np.fromfile(path, dtype=[("label", "<i4"), ("x", "<f4", (f,))],
                           count=n, offset=header.data_offset)
        if len(rows) != n:
            raise DatasetError("truncated dataset")
        return header, rows["label"].astype(np.float64), rows["x"].astype(np.float64)
    raw = Path(path).read_bytes()
    y = np.empty(n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    idx_parts, val_parts = [], []
    pos = header.data_offset
    for i in range(n):
        length = record_length_at(raw, pos, header.format, f)
        if length is None or pos + length > len(raw):
            raise DatasetError(f"truncated record {i}")
        y[i] = int.from_bytes(raw[pos:pos + 4], "little", signed=True)
        pairs = np.frombuffer(raw, dtype=PAIR_DTYPE, count=(length - 8) // 8, offset=pos + 8)
        idx_parts.append(pairs["index"])
        val_parts.append(pairs["value"])
        indptr[i + 1] = indptr[i] + len(pairs)
        pos += length
    indices = np.concatenate(idx_parts).astype(np.int64)
    values = np.concatenate(val_parts).astype(np.float64)
    return header, y, (indptr, indices, values)


def sidecar_path(path) -> Path:
    return Path(os.fspath(path)).with_suffix(".shfo")
