"""Mini-batch SGD on an L2-regularized linear classifier, with I/O-aware timing.

The objective is  f(w, b) = mean_i loss(y_i, w.x_i + b) + lam * ||w||^2.
"""
from __future__ import annotations

import enum
import math
import queue
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import shuffle
from .dataset import load_arrays, offset_table_for, read_header, read_record_at, sequential_stream
from .shuffle import Strategy, StrategyConfig
from .storage import PROFILES, DeviceProfile, IoStats, StorageContext, estimate_time

DIVERGENCE_FACTOR = 1e3


class TrainingDiverged(RuntimeError):
    pass


class Loss(str, enum.Enum):
    LOGISTIC = "logistic"
    SQUARED_HINGE = "squared-hinge"


class OverlapMode(str, enum.Enum):
    NONE = "none"
    PREFETCH = "prefetch"


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, num_features: int) -> "LinearModel":
        return cls(np.zeros(num_features), 0.0)

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.bias)


@dataclass
class Batch:
    """Labels plus features as a dense (k, F) array or a CSR triple (indptr, indices, values)."""

    y: np.ndarray
    X: object
    num_features: int
    ids: np.ndarray | None = None

    @property
    def sparse(self) -> bool:
        return isinstance(self.X, tuple)

    def __len__(self):
        return len(self.y)

    @property
    def nnz(self) -> int:
        return len(self.X[2]) if self.sparse else self.X.size

    @classmethod
    def from_records(cls, records, num_features: int) -> "Batch":
        y = np.array([r.label for r in records], dtype=np.float64)
        ids = np.array([r.instance_id for r in records], dtype=np.int64)
        if records and records[0].is_sparse:
            indptr = np.zeros(len(records) + 1, dtype=np.int64)
            np.cumsum([r.nnz for r in records], out=indptr[1:])
            indices = np.concatenate([r.indices for r in records]).astype(np.int64)
            values = np.concatenate([r.values for r in records])
            return cls(y, (indptr, indices, values), num_features, ids)
        X = np.stack([r.values for r in records]) if records else np.empty((0, num_features), np.float32)
        return cls(y, X, num_features, ids)

    def repeated(self, times: int) -> "Batch":
        if not self.sparse:
            return Batch(np.tile(self.y, times), np.tile(self.X, (times, 1)), self.num_features)
        indptr, indices, values = self.X
        step = indptr[-1]
        new_ptr = np.concatenate([indptr[:-1] + t * step for t in range(times)] + [[times * step]])
        return Batch(np.tile(self.y, times), (new_ptr, np.tile(indices, times), np.tile(values, times)),
                     self.num_features)


def _margins(X, w, b, sparse):
    if not sparse:
        return X @ w + b
    indptr, indices, values = X
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    return np.bincount(rows, weights=values * w[indices], minlength=len(indptr) - 1) + b


def _xt_dot(X, g, num_features, sparse):
    if not sparse:
        return X.T @ g
    indptr, indices, values = X
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    return np.bincount(indices, weights=values * g[rows], minlength=num_features)


def _expit(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _loss_and_dz(loss: Loss, y, z):
    """Per-instance loss and its derivative with respect to the margin z."""
    if loss is Loss.LOGISTIC:
        yz = y * z
        return np.logaddexp(0.0, -yz), -y * _expit(-yz)
    m = np.maximum(0.0, 1.0 - y * z)
    return m * m, -2.0 * y * m


def batch_gradient(model: LinearModel, batch: Batch, loss: Loss, lam: float):
    """Gradient of the batch objective; returns (grad_w, grad_b, objective value)."""
    loss = Loss(loss)
    k = len(batch)
    if k == 0:
        raise ValueError("empty batch")
    if batch.num_features != len(model.weights):
        raise ValueError(f"dimension mismatch: batch F={batch.num_features}, model F={len(model.weights)}")
    feats = batch.X[2] if batch.sparse else batch.X
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(batch.y))):
        raise ValueError("non-finite input values")
    return _gradient(model, batch, loss, lam)


def _gradient(model, batch, loss, lam):
    w = model.weights
    z = _margins(batch.X, w, model.bias, batch.sparse)
    li, dz = _loss_and_dz(loss, batch.y, z)
    gw = _xt_dot(batch.X, dz, batch.num_features, batch.sparse) / len(batch) + 2.0 * lam * w
    return gw, float(dz.mean()), float(li.mean() + lam * (w @ w))


def objective(model: LinearModel, batch: Batch, loss: Loss, lam: float) -> float:
    w = model.weights
    z = _margins(batch.X, w, model.bias, batch.sparse)
    li, _ = _loss_and_dz(Loss(loss), batch.y, z)
    return float(li.mean() + lam * (w @ w))


def _lipschitz(batch: Batch, loss: Loss, lam: float, iters: int = 100) -> float:
    """Upper estimate of the gradient's Lipschitz constant via power iteration on [X 1]."""
    n, f = len(batch), batch.num_features
    rng = np.random.default_rng(0)
    v = rng.standard_normal(f + 1)
    sigma2 = 0.0
    for _ in range(iters):
        v /= np.linalg.norm(v)
        u = _margins(batch.X, v[:f], v[f], batch.sparse)
        v = np.concatenate([_xt_dot(batch.X, u, f, batch.sparse), [u.sum()]])
        sigma2 = float(np.linalg.norm(v))
    curvature = 0.25 if Loss(loss) is Loss.LOGISTIC else 2.0
    return 1.05 * curvature * sigma2 / n + 2.0 * lam


def reference_run(batch: Batch, loss: Loss, lam: float, epochs: int = 500) -> list[float]:
    """Full-batch accelerated gradient descent; returns the objective after every epoch.

    With the whole dataset as one batch every epoch sees all instances at once,
    which makes this the limiting case of full shuffling.
    """
    loss = Loss(loss)
    step = 1.0 / _lipschitz(batch, loss, lam)
    x = LinearModel.zeros(batch.num_features)
    prev = x.copy()
    t = 1.0
    history = []
    best = math.inf
    for _ in range(epochs):
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        ym = LinearModel(x.weights + beta * (x.weights - prev.weights), x.bias + beta * (x.bias - prev.bias))
        gw, gb, _ = _gradient(ym, batch, loss, lam)
        prev = x
        x = LinearModel(ym.weights - step * gw, ym.bias - step * gb)
        f = objective(x, batch, loss, lam)
        if history and f > history[-1]:
            # momentum overshoot: restart from the current iterate
            t_next = 1.0
            prev = x
        best = min(best, f)
        t = t_next
        history.append(f)
        if len(history) > 50 and history[-51] - best <= 1e-15 * abs(best):
            break  # flat for 50 epochs: at machine precision
    return history


def reference_objective(batch: Batch, loss: Loss, lam: float, epochs: int = 500) -> float:
    return min(reference_run(batch, loss, lam, epochs))


def relative_fvd(f: float, f_star: float) -> float:
    if f_star == 0:
        raise ZeroDivisionError("relative function value difference undefined for f* = 0")
    return abs(f - f_star) / abs(f_star)


@dataclass(frozen=True)
class TimeModel:
    t_preprocess: float
    t_load: float
    t_comp: float
    t_overlapping: float
    epochs: int

    def __post_init__(self):
        if min(self.t_preprocess, self.t_load, self.t_comp, self.t_overlapping) < 0 or self.epochs < 0:
            raise ValueError("times and epochs must be non-negative")
        if self.t_overlapping > min(self.t_load, self.t_comp):
            raise ValueError("overlap cannot exceed min(t_load, t_comp)")


def total_time(tm: TimeModel) -> float:
    return tm.t_preprocess + (tm.t_load + tm.t_comp - tm.t_overlapping) * tm.epochs


def overlap_time(t_load: float, t_comp: float, mode) -> float:
    if OverlapMode(mode) is OverlapMode.PREFETCH:
        return min(t_load, t_comp)
    return 0.0


@dataclass
class TrainConfig:
    learning_rate: float = 1.0
    lam: float = 1e-3
    loss: Loss = Loss.LOGISTIC
    max_epochs: int = 30
    target_rfvd: float = 1e-2
    overlap_mode: OverlapMode = OverlapMode.NONE
    # simulated compute cost per stored feature value per epoch
    comp_sec_per_nnz: float = 1e-8

    def __post_init__(self):
        self.loss = Loss(self.loss)
        self.overlap_mode = OverlapMode(self.overlap_mode)
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning rate must be finite and >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.target_rfvd <= 0:
            raise ValueError("target rfvd must be > 0")
        if self.max_epochs < 0:
            raise ValueError("max epochs must be >= 0")


@dataclass
class EpochRow:
    epoch: int
    objective: float
    rfvd: float
    stats: IoStats
    t_load_sim: float
    t_load_wall: float
    t_comp_wall: float
    t_comp_sim: float
    trained: int
    max_page_loads: int = 0


@dataclass
class ConvergenceReport:
    strategy: Strategy
    seed: int
    profile: DeviceProfile
    overlap_mode: OverlapMode
    f_star: float
    f_initial: float
    target_rfvd: float
    rows: list = field(default_factory=list)
    preprocess_stats: IoStats = field(default_factory=IoStats)
    t_preprocess_wall: float = 0.0
    epochs_to_target: int | None = None

    @property
    def objectives(self) -> list[float]:
        return [r.objective for r in self.rows]

    @property
    def epochs(self) -> int:
        return len(self.rows)

    @property
    def total_stats(self) -> IoStats:
        out = self.preprocess_stats.snapshot()
        for r in self.rows:
            out = out + r.stats
        return out

    def retime(self, profile: DeviceProfile) -> "ConvergenceReport":
        """Same run re-priced under another device; only simulated times change."""
        rows = [replace(r, t_load_sim=estimate_time(r.stats, profile)) for r in self.rows]
        return replace(self, profile=profile, rows=rows)

    def time_model(self, simulated: bool = True) -> TimeModel:
        e = self.epochs
        if simulated:
            pre = estimate_time(self.preprocess_stats, self.profile)
            load = sum(r.t_load_sim for r in self.rows) / e if e else 0.0
            comp = sum(r.t_comp_sim for r in self.rows) / e if e else 0.0
        else:
            pre = self.t_preprocess_wall
            load = sum(r.t_load_wall for r in self.rows) / e if e else 0.0
            comp = sum(r.t_comp_wall for r in self.rows) / e if e else 0.0
        return TimeModel(pre, load, comp, overlap_time(load, comp, self.overlap_mode), e)

    def total_time(self, simulated: bool = True) -> float:
        return total_time(self.time_model(simulated))


class _LoadTimer:
    def __init__(self):
        self.seconds = 0.0


def _epoch_batches(run, plan, epoch, timer):
    """Yield Batch objects for one epoch in plan order, doing the strategy's I/O."""
    ctx, header, cfg = run["ctx"], run["header"], run["cfg"]
    f_dim = header.num_features
    s = cfg.strategy
    t0 = time.perf_counter()
    if s in (Strategy.LIRS_INSTANCE, Strategy.LIRS_PAGE):
        f = run["file"]
        offs, lens = run["offset_lists"]
        for ids in plan.batches:
            recs = [read_record_at(ctx, f, header, (offs[i], lens[i]), i) for i in ids.tolist()]
            batch = Batch.from_records(recs, f_dim)
            timer.seconds += time.perf_counter() - t0
            yield batch
            t0 = time.perf_counter()
    elif s is Strategy.BMF:
        assignment = run["assignment"]
        for k in shuffle.bmf_batch_order(cfg.batches, epoch, cfg.seed):
            members = assignment.members[k]
            recs = []
            if len(members):
                with ctx.open(assignment.files[k]) as bf:
                    stream = sequential_stream(ctx, bf, header.format, f_dim, 0, len(members))
                    for rec in stream:
                        rec.instance_id = int(members[rec.instance_id])
                        recs.append(rec)
            batch = Batch.from_records(recs, f_dim)
            timer.seconds += time.perf_counter() - t0
            yield batch
            t0 = time.perf_counter()
    else:
        stream = sequential_stream(ctx, run["file"], header.format, f_dim,
                                   header.data_offset, header.num_instances)
        if s is Strategy.QUEUE:
            stream = shuffle.queue_shuffle_stream(stream, cfg.queue_size,
                                                  shuffle.derive_rng(cfg.seed, epoch, shuffle._QUEUE))
        for lo, hi in shuffle.batch_bounds(header.num_instances, cfg.batches):
            recs = [next(stream) for _ in range(hi - lo)]
            batch = Batch.from_records(recs, f_dim)
            timer.seconds += time.perf_counter() - t0
            yield batch
            t0 = time.perf_counter()
    timer.seconds += time.perf_counter() - t0


_DONE = object()


class _Failed:
    def __init__(self, exc):
        self.exc = exc


def _prefetch(gen):
    """Run `gen` on a loader thread, handing items over through a capacity-1 queue."""
    handoff: queue.Queue = queue.Queue(maxsize=1)

    def loader():
        try:
            for item in gen:
                handoff.put(item)
            handoff.put(_DONE)
        except BaseException as exc:  # surfaced on the compute side
            handoff.put(_Failed(exc))

    th = threading.Thread(target=loader, name="shufbench-loader", daemon=True)
    th.start()
    try:
        while True:
            item = handoff.get()
            if item is _DONE:
                break
            if isinstance(item, _Failed):
                raise item.exc
            yield item
    finally:
        th.join()


def run_training(dataset_path, strategy: StrategyConfig, train: TrainConfig,
                 profile: DeviceProfile | None = None, cache_pages: int = 1024,
                 workdir=None, f_star: float | None = None, eval_data=None,
                 trace: list | None = None) -> ConvergenceReport:
    """Pre-process per strategy, then train epoch by epoch until the rfvd target or max_epochs.

    BMF batch files go to a temporary directory under `workdir` and are
    removed afterwards. `eval_data` is the (header, y, X) triple from load_arrays, used only to
    evaluate the full objective after each epoch. `trace`, if given, collects
    (epoch, batch_index, instance_ids) in training order.
    """
    profile = profile or PROFILES["optane"]
    header = read_header(dataset_path)
    if strategy.batches > header.num_instances:
        raise ValueError("more batches than instances")
    if eval_data is None:
        eval_data = load_arrays(dataset_path)
    _, y_all, X_all = eval_data
    full = Batch(y_all, X_all, header.num_features)
    if f_star is None:
        f_star = reference_objective(full, train.loss, train.lam)

    ctx = StorageContext(page_size=strategy.page_size, cache_pages=cache_pages)
    run = {"ctx": ctx, "header": header, "cfg": strategy}
    scratch = None
    s = strategy.strategy

    t0 = time.perf_counter()
    if s is Strategy.BMF:
        scratch = tempfile.TemporaryDirectory(prefix="shufbench-bmf-", dir=workdir)
        run["assignment"] = shuffle.bmf_initial_split(dataset_path, strategy.batches, strategy.seed,
                                                      scratch.name, ctx)
    elif s in (Strategy.LIRS_INSTANCE, Strategy.LIRS_PAGE):
        run["offsets"] = offset_table_for(dataset_path, header, ctx)
        run["offset_lists"] = (run["offsets"].offsets.tolist(), run["offsets"].lengths.tolist())
    t_pre_wall = time.perf_counter() - t0
    pre_stats = ctx.stats.snapshot()

    model = LinearModel.zeros(header.num_features)
    f0 = objective(model, full, train.loss, train.lam)
    report = ConvergenceReport(s, strategy.seed, profile, train.overlap_mode, f_star, f0,
                               train.target_rfvd, preprocess_stats=pre_stats, t_preprocess_wall=t_pre_wall)
    if s is not Strategy.BMF:
        run["file"] = ctx.open(dataset_path)
    try:
        for epoch in range(train.max_epochs):
            ctx.new_epoch()
            before = ctx.stats.snapshot()
            timer = _LoadTimer()
            t_plan = time.perf_counter()
            plan = None
            if s in (Strategy.LIRS_INSTANCE, Strategy.LIRS_PAGE):
                plan = shuffle.make_plan(strategy, header.num_instances, epoch, run.get("offsets"))
            timer.seconds += time.perf_counter() - t_plan
            batches = _epoch_batches(run, plan, epoch, timer)
            if train.overlap_mode is OverlapMode.PREFETCH:
                batches = _prefetch(batches)
            t_comp = 0.0
            trained = 0
            nnz = 0
            for k, batch in enumerate(batches):
                if trace is not None:
                    trace.append((epoch, k, batch.ids))
                if len(batch) == 0:
                    continue
                tc = time.perf_counter()
                gw, gb, _ = batch_gradient(model, batch, train.loss, train.lam)
                model.weights -= train.learning_rate * gw
                model.bias -= train.learning_rate * gb
                t_comp += time.perf_counter() - tc
                trained += len(batch)
                nnz += batch.nnz
            stats = ctx.stats - before
            f = objective(model, full, train.loss, train.lam)
            if not math.isfinite(f) or f > DIVERGENCE_FACTOR * f0:
                raise TrainingDiverged(f"objective {f!r} at epoch {epoch + 1} (initial {f0!r})")
            rfvd = relative_fvd(f, f_star)
            report.rows.append(EpochRow(epoch + 1, f, rfvd, stats, estimate_time(stats, profile),
                                        timer.seconds, t_comp, train.comp_sec_per_nnz * nnz, trained,
                                        max(ctx.epoch_loads.values(), default=0)))
            if rfvd <= train.target_rfvd:
                report.epochs_to_target = epoch + 1
                break
    finally:
        if "file" in run:
            run["file"].close()
        if scratch is not None:
            scratch.cleanup()
    return report
