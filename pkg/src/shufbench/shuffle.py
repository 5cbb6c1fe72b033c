"""Per-epoch batch plans for the five shuffling strategies.

Every plan is a pure function of (config, epoch). Randomness comes from a
PCG64 stream derived from (seed, epoch, purpose) through numpy's SeedSequence,
so each epoch can be regenerated independently of the others.
"""
from __future__ import annotations

import enum
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import OffsetTable, read_header, sequential_stream
from .records import encode_record
from .storage import StorageContext

MIB = 1 << 20


class Strategy(str, enum.Enum):
    NONE = "none"
    QUEUE = "queue"
    BMF = "bmf"
    LIRS_INSTANCE = "lirs-instance"
    LIRS_PAGE = "lirs-page"


# stream tags keep the draws for different purposes independent
_LIRS, _PAGE, _BMF_ORDER, _BMF_SPLIT, _QUEUE = range(1, 6)


def derive_rng(seed: int, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, purpose])))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of range(n), shuffled in place from the back."""
    perm = list(range(n))
    if n > 1:
        # draw j_i uniform in [0, i] for i = n-1 .. 1
        draws = rng.integers(0, np.arange(n, 1, -1)).tolist()
        for i, j in zip(range(n - 1, 0, -1), draws):
            perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def batch_bounds(n_units: int, b: int) -> list[tuple[int, int]]:
    """Contiguous slices of n_units into b parts; the first n_units % b parts get one extra."""
    base, extra = divmod(n_units, b)
    bounds, start = [], 0
    for k in range(b):
        size = base + (k < extra)
        bounds.append((start, start + size))
        start += size
    return bounds


@dataclass
class StrategyConfig:
    strategy: Strategy
    batches: int
    queue_size: int = 10000
    page_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.batches < 1:
            raise ValueError("batch count must be >= 1")
        if self.queue_size < 1:
            raise ValueError("queue size must be >= 1")
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ValueError("page size must be a power of two")


@dataclass(frozen=True)
class EpochPlan:
    epoch: int
    strategy: Strategy
    seed: int
    batches: tuple  # of int64 arrays

    def flat(self) -> np.ndarray:
        if not self.batches:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(self.batches)

    def same_as(self, other: "EpochPlan") -> bool:
        return (len(self.batches) == len(other.batches)
                and all(np.array_equal(a, b) for a, b in zip(self.batches, other.batches)))

    def dump(self) -> str:
        return "".join(f"{self.epoch},{k},{i}\n" for k, batch in enumerate(self.batches) for i in batch)


def _split(order: np.ndarray, b: int, epoch: int, strategy: Strategy, seed: int) -> EpochPlan:
    return EpochPlan(epoch, strategy, seed, tuple(order[lo:hi] for lo, hi in batch_bounds(len(order), b)))


def plan_none(n: int, b: int, epoch: int = 0, seed: int = 0) -> EpochPlan:
    return _split(np.arange(n, dtype=np.int64), b, epoch, Strategy.NONE, seed)


def plan_lirs_instance(n: int, b: int, epoch: int, seed: int) -> EpochPlan:
    if b > n:
        raise ValueError(f"batch count {b} exceeds instance count {n}")
    perm = fisher_yates(n, derive_rng(seed, epoch, _LIRS))
    return _split(perm, b, epoch, Strategy.LIRS_INSTANCE, seed)


@dataclass(frozen=True)
class ShuffleUnit:
    page_id: int | None  # None for instance units
    members: tuple


def page_units(offsets: OffsetTable, page_size: int) -> list[ShuffleUnit]:
    """Group instances by the page holding their first byte, ascending ids within a page."""
    pages = (offsets.offsets // np.uint64(page_size)).astype(np.int64)
    units = []
    if len(pages) == 0:
        return units
    # offsets are increasing, so each page's instances form one contiguous run
    cuts = np.flatnonzero(np.diff(pages)) + 1
    for run in np.split(np.arange(len(pages), dtype=np.int64), cuts):
        units.append(ShuffleUnit(int(pages[run[0]]), tuple(run.tolist())))
    return units


def plan_lirs_page(offsets: OffsetTable, page_size: int, b: int, epoch: int, seed: int) -> EpochPlan:
    """Shuffle whole pages of instances and deal them round-robin into b batches.

    Falls back to instance units when the average record is at least a page.
    """
    n = len(offsets)
    if n and float(np.mean(offsets.lengths)) >= page_size:
        members = [(i,) for i in range(n)]
    else:
        members = [u.members for u in page_units(offsets, page_size)]
    if b > len(members):
        raise ValueError(f"batch count {b} exceeds unit count {len(members)}")
    perm = fisher_yates(len(members), derive_rng(seed, epoch, _PAGE))
    dealt = [[] for _ in range(b)]
    for k, u in enumerate(perm.tolist()):
        dealt[k % b].extend(members[u])
    return EpochPlan(epoch, Strategy.LIRS_PAGE, seed, tuple(np.array(d, dtype=np.int64) for d in dealt))


@dataclass
class BmfAssignment:
    """Fixed instance -> batch mapping from the one-time split."""

    batch_of: np.ndarray
    members: list = field(default_factory=list)  # per batch, ids in file order
    files: list = field(default_factory=list)

    @property
    def num_batches(self) -> int:
        return len(self.members)

    def position_of(self, instance_id: int) -> tuple[int, int]:
        b = int(self.batch_of[instance_id])
        return b, int(np.searchsorted(self.members[b], instance_id))


def bmf_assign(n: int, b: int, seed: int) -> BmfAssignment:
    batch_of = derive_rng(seed, 0, _BMF_SPLIT).integers(0, b, size=n)
    members = [np.flatnonzero(batch_of == k).astype(np.int64) for k in range(b)]
    return BmfAssignment(batch_of, members)


def bmf_initial_split(path, b: int, seed: int, scratch_dir, ctx: StorageContext | None = None) -> BmfAssignment:
    """Stream the dataset once and append every record to a randomly chosen batch file.

    Batch files hold raw records (no header) in the source encoding. Reads are
    accounted as a sequential scan, appends as random page writes.
    """
    ctx = ctx or StorageContext()
    header = read_header(path)
    assignment = bmf_assign(header.num_instances, b, seed)
    scratch_dir = Path(scratch_dir)
    scratch_dir.mkdir(parents=True, exist_ok=True)
    assignment.files = [scratch_dir / f"batch_{k:04d}.shfb" for k in range(b)]
    handles = [open(p, "wb") for p in assignment.files]
    sizes = [0] * b
    try:
        with ctx.open(path) as src:
            stream = sequential_stream(ctx, src, header.format, header.num_features,
                                       header.data_offset, header.num_instances)
            for rec in stream:
                k = int(assignment.batch_of[rec.instance_id])
                data = encode_record(rec)
                handles[k].write(data)
                ctx.record_write(sizes[k], len(data), random=True)
                sizes[k] += len(data)
    finally:
        for h in handles:
            h.close()
    return assignment


def plan_bmf(n: int, b: int, epoch: int, seed: int, assignment: BmfAssignment | None) -> EpochPlan:
    """Same batches every epoch; only their order is reshuffled."""
    if assignment is None:
        raise ValueError("BMF needs the initial split's assignment")
    if assignment.num_batches != b or len(assignment.batch_of) != n:
        raise ValueError("assignment does not match (n, b)")
    order = bmf_batch_order(b, epoch, seed)
    return EpochPlan(epoch, Strategy.BMF, seed, tuple(assignment.members[k] for k in order))


def bmf_batch_order(b: int, epoch: int, seed: int) -> list[int]:
    """Batch-file indices in the order epoch `epoch` visits them."""
    return fisher_yates(b, derive_rng(seed, epoch, _BMF_ORDER)).tolist()


def queue_shuffle_stream(items: Iterable, q: int, rng: np.random.Generator) -> Iterator:
    """Bounded shuffle: fill a q-slot buffer in order, emit a random slot, refill it.

    An item read at position p is emitted no earlier than position p - (q - 1).
    """
    if q < 1:
        raise ValueError("queue size must be >= 1")
    it = iter(items)
    buf = []
    for item in it:
        buf.append(item)
        if len(buf) == q:
            break
    # draws are taken in blocks to keep per-item overhead low
    draws = rng.random(1024)
    used = 0
    while buf:
        if used == len(draws):
            draws = rng.random(1024)
            used = 0
        j = int(draws[used] * len(buf))
        used += 1
        out = buf[j]
        nxt = next(it, _END)
        if nxt is _END:
            buf[j] = buf[-1]
            buf.pop()
        else:
            buf[j] = nxt
        yield out


_END = object()


def plan_queue(n: int, b: int, q: int, epoch: int, seed: int) -> EpochPlan:
    order = np.fromiter(queue_shuffle_stream(range(n), q, derive_rng(seed, epoch, _QUEUE)),
                        dtype=np.int64, count=n)
    return _split(order, b, epoch, Strategy.QUEUE, seed)


def make_plan(cfg: StrategyConfig, n: int, epoch: int, offsets: OffsetTable | None = None,
              assignment: BmfAssignment | None = None) -> EpochPlan:
    s = cfg.strategy
    if s is Strategy.NONE:
        return plan_none(n, cfg.batches, epoch, cfg.seed)
    if s is Strategy.QUEUE:
        return plan_queue(n, cfg.batches, cfg.queue_size, epoch, cfg.seed)
    if s is Strategy.BMF:
        return plan_bmf(n, cfg.batches, epoch, cfg.seed, assignment)
    if s is Strategy.LIRS_INSTANCE:
        return plan_lirs_instance(n, cfg.batches, epoch, cfg.seed)
    if offsets is None:
        raise ValueError("page-aware planning needs an offset table")
    return plan_lirs_page(offsets, cfg.page_size, cfg.batches, epoch, cfg.seed)


def assignment_table_bytes(n: int, id_bytes: int = 8) -> int:
    return n * id_bytes


def offset_table_bytes(n: int, sparse: bool, offset_bytes: int = 8) -> int:
    return n * offset_bytes if sparse else 0
