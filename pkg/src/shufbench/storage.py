"""Page-granular I/O accounting, a simulated LRU page cache and the IOPS cost model."""
from __future__ import annotations

import enum
import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, fields, replace
from pathlib import Path

DEFAULT_PAGE_SIZE = 4096


class StorageError(OSError):
    pass


class ShortReadError(StorageError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    """Throughput of one device; one operation moves one page."""

    name: str
    seq_read_iops: float
    seq_write_iops: float
    rand_read_iops: float
    rand_write_iops: float

    def __post_init__(self):
        rates = (self.seq_read_iops, self.seq_write_iops, self.rand_read_iops, self.rand_write_iops)
        if any(r <= 0 for r in rates):
            raise ValueError(f"profile {self.name!r}: all rates must be > 0")


# WD10EZEX, Intel SSD 750, Optane P4800X
PROFILES = {
    "hdd": DeviceProfile("hdd", 40000, 36000, 600, 300),
    "ssd": DeviceProfile("ssd", 563000, 230000, 430000, 230000),
    "optane": DeviceProfile("optane", 614000, 512000, 550000, 500000),
}

_PROFILE_KEYS = ("seq_read_iops", "seq_write_iops", "rand_read_iops", "rand_write_iops")


def parse_profile(text: str, default_name: str = "custom") -> DeviceProfile:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    unknown = set(values) - {"name", *_PROFILE_KEYS}
    if unknown:
        raise ValueError(f"unknown profile keys: {sorted(unknown)}")
    missing = [k for k in _PROFILE_KEYS if k not in values]
    if missing:
        raise ValueError(f"missing profile keys: {missing}")
    return DeviceProfile(values.get("name", default_name), *(float(values[k]) for k in _PROFILE_KEYS))


def load_profile(name_or_path: str | os.PathLike) -> DeviceProfile:
    """Built-in profile name (hdd, ssd, optane) or path to a key=value file."""
    if isinstance(name_or_path, str) and name_or_path in PROFILES:
        return PROFILES[name_or_path]
    path = Path(name_or_path)
    if not path.is_file():
        raise ValueError(f"unknown device profile {str(name_or_path)!r}")
    return parse_profile(path.read_text(), default_name=path.stem)


@dataclass
class IoStats:
    pages_read_seq: int = 0
    pages_read_rand: int = 0
    pages_written_seq: int = 0
    pages_written_rand: int = 0
    page_cache_hits: int = 0
    redundant_page_loads: int = 0
    read_calls: int = 0

    @property
    def pages_read(self) -> int:
        return self.pages_read_seq + self.pages_read_rand

    def snapshot(self) -> "IoStats":
        return replace(self)

    def __sub__(self, other: "IoStats") -> "IoStats":
        return IoStats(*(getattr(self, f.name) - getattr(other, f.name) for f in fields(self)))

    def __add__(self, other: "IoStats") -> "IoStats":
        return IoStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def estimate_time(stats: IoStats, profile: DeviceProfile) -> float:
    return (stats.pages_read_seq / profile.seq_read_iops
            + stats.pages_read_rand / profile.rand_read_iops
            + stats.pages_written_seq / profile.seq_write_iops
            + stats.pages_written_rand / profile.rand_write_iops)


class Access(enum.Enum):
    SEQUENTIAL = "seq"
    RANDOM = "rand"


def classify_access(previous_page, page: int) -> Access:
    if previous_page is None or page == previous_page + 1:
        return Access.SEQUENTIAL
    return Access.RANDOM


class PageCache:
    """Fixed-capacity LRU set of resident page keys."""

    def __init__(self, capacity_pages: int):
        if capacity_pages < 1:
            raise ValueError("cache capacity must be >= 1 page")
        self.capacity_pages = capacity_pages
        self._pages: OrderedDict = OrderedDict()

    def __len__(self):
        return len(self._pages)

    def __contains__(self, key):
        return key in self._pages

    def access(self, key) -> bool:
        """Touch `key`; returns True on a hit. A miss inserts it, evicting the LRU page if full."""
        pages = self._pages
        if key in pages:
            pages.move_to_end(key)
            return True
        if len(pages) >= self.capacity_pages:
            pages.popitem(last=False)
        pages[key] = None
        return False

    def resident(self) -> list:
        """Resident keys, least recently used first."""
        return list(self._pages)

    def clear(self):
        self._pages.clear()


class StorageFile:
    """An open file registered with a StorageContext."""

    def __init__(self, path):
        self.path = Path(path)
        self.key = str(self.path.resolve())
        self.fd = -1
        self.fd = os.open(self.path, os.O_RDONLY)

    @property
    def size(self) -> int:
        return os.fstat(self.fd).st_size

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        self.close()


class StorageContext:
    """One run's I/O accounting: stats, page cache and device cursor.

    The cursor is the last page fetched from the device, across all files; a fetch
    in a different file than the cursor's counts as random (an inter-file seek).
    Not thread-safe: one executor owns a context at a time.
    """

    def __init__(self, page_size: int = DEFAULT_PAGE_SIZE, cache_pages: int = 1024, stats: IoStats | None = None):
        if page_size <= 0 or page_size & (page_size - 1):
            raise ValueError("page size must be a power of two")
        self.page_size = page_size
        self.cache = PageCache(cache_pages)
        self.stats = stats if stats is not None else IoStats()
        self._cursor = None  # (file key, page)
        self.epoch_loads: Counter = Counter()  # device fetches per (file, page) this epoch

    def open(self, path) -> StorageFile:
        return StorageFile(path)

    def new_epoch(self):
        self.epoch_loads.clear()

    def _touch(self, file_key: str, page: int):
        key = (file_key, page)
        stats = self.stats
        if self.cache.access(key):
            stats.page_cache_hits += 1
            return
        cur = self._cursor
        # a page in another file can never be "previous + 1"
        prev = None if cur is None else (cur[1] if cur[0] == file_key else -2)
        if classify_access(prev, page) is Access.SEQUENTIAL:
            stats.pages_read_seq += 1
        else:
            stats.pages_read_rand += 1
        loads = self.epoch_loads
        if key in loads:
            stats.redundant_page_loads += 1
        loads[key] += 1
        self._cursor = (file_key, page)

    def positioned_read(self, f: StorageFile, offset: int, length: int) -> bytes:
        if offset < 0 or length <= 0:
            raise ShortReadError(f"bad read range offset={offset} length={length}")
        data = os.pread(f.fd, length, offset)
        if len(data) != length:
            raise ShortReadError(f"short read at offset {offset}: wanted {length}, got {len(data)}")
        p = self.page_size
        self.stats.read_calls += 1
        first, last = offset // p, (offset + length - 1) // p
        self._touch(f.key, first)
        for page in range(first + 1, last + 1):
            self._touch(f.key, page)
        return data

    def sequential_pages(self, f: StorageFile, start: int = 0):
        """Yield the file's bytes from `start` one page-sized chunk at a time, in file order."""
        size = f.size
        p = self.page_size
        pos = start
        while pos < size:
            end = min((pos // p + 1) * p, size)
            yield self.positioned_read(f, pos, end - pos)
            pos = end

    def record_write(self, offset: int, length: int, random: bool = True):
        """Account pages touched by a write of `length` bytes at `offset`."""
        if length <= 0:
            return
        p = self.page_size
        npages = (offset + length - 1) // p - offset // p + 1
        if random:
            self.stats.pages_written_rand += npages
        else:
            self.stats.pages_written_seq += npages
