"""Acceptance criteria 1-10. Each test records a one-line detail string; the
conftest prints a PASS/FAIL line per criterion at the end of the run."""
import statistics
import time

import numpy as np
import pytest

from conftest import CONVERGENCE_STRATEGIES, SEEDS
from lru_oracle import replay_matches
from oracles import finite_difference_gradient, max_relative_error, random_case
from shufbench.dataset import OffsetTable, generate_synthetic, load_arrays
from shufbench.report import read_csv, recomputed_total, summary_row, write_run_report
from shufbench.shuffle import (MIB, Strategy, StrategyConfig, assignment_table_bytes, bmf_assign, make_plan,
                               page_units, queue_shuffle_stream)
from shufbench.storage import PROFILES, PageCache
from shufbench.trainer import Batch, Loss, TrainConfig, batch_gradient, reference_objective, run_training


def note(record_property, text):
    record_property("detail", text)
    print(text)


# 1 ------------------------------------------------------------------------


def random_offsets(rng, n):
    lengths = rng.integers(8, 6000, size=n).astype(np.uint32)
    start = int(rng.integers(32, 5000))
    offsets = start + np.concatenate([[0], np.cumsum(lengths[:-1], dtype=np.uint64)])
    return OffsetTable(offsets.astype(np.uint64), lengths)


@pytest.mark.criterion(1)
def test_permutation_coverage(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(20):
        n = int(rng.integers(1, 3000))
        page_size = int(2 ** rng.integers(9, 14))
        offsets = random_offsets(rng, n)
        units = len(page_units(offsets, page_size)) if np.mean(offsets.lengths) < page_size else n
        b = int(rng.integers(1, min(n, units, 64) + 1))
        q = int(rng.integers(1, 2 * n + 1))
        seed = int(rng.integers(0, 2**63))
        assignment = bmf_assign(n, b, seed)
        for s in Strategy:
            cfg = StrategyConfig(s, b, queue_size=q, page_size=page_size, seed=seed)
            for epoch in range(3):
                plan = make_plan(cfg, n, epoch, offsets, assignment)
                assert len(plan.batches) == b
                flat = plan.flat()
                assert len(flat) == n and np.array_equal(np.sort(flat), np.arange(n)), (s, n, b)
                checked += 1
    elapsed = time.perf_counter() - t0
    note(record_property, f"{checked} epoch plans (5 strategies x 20 configs x 3 epochs) are permutations; {elapsed:.1f}s")
    assert elapsed < 10


# 2 ------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_page_transfer_halving(tmp_path, record_property):
    t0 = time.perf_counter()
    path = tmp_path / "half.shfd"
    generate_synthetic(path, 8192, 511, "dense", seed=2, align=4096)  # 2048-byte records, page aligned
    data = load_arrays(path)
    header, y, X = data
    f_star = reference_objective(Batch(y, X, header.num_features), Loss.LOGISTIC, 1e-3)
    reads = {}
    for s in (Strategy.LIRS_INSTANCE, Strategy.LIRS_PAGE):
        report = run_training(path, StrategyConfig(s, 50, seed=7), TrainConfig(max_epochs=1),
                              cache_pages=8, f_star=f_star, eval_data=data)
        reads[s] = report.rows[0].stats.pages_read
    ratio = reads[Strategy.LIRS_PAGE] / reads[Strategy.LIRS_INSTANCE]
    elapsed = time.perf_counter() - t0
    note(record_property, f"page reads lirs-page={reads[Strategy.LIRS_PAGE]} "
                          f"lirs-instance={reads[Strategy.LIRS_INSTANCE]} ratio={ratio:.4f} (want 0.50+-0.01); "
                          f"{elapsed:.1f}s")
    assert abs(ratio - 0.5) <= 0.01
    assert elapsed < 30


# 3 ------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_boundary_double_load_bound(tmp_path, record_property):
    t0 = time.perf_counter()
    path = tmp_path / "unaligned.shfd"
    generate_synthetic(path, 4000, 767, "dense", seed=3)  # 3072-byte records from byte 32
    dataset_pages = -(-path.stat().st_size // 4096)
    report = run_training(path, StrategyConfig(Strategy.LIRS_PAGE, 40, seed=1), TrainConfig(max_epochs=3),
                          cache_pages=4)
    max_loads = max(r.max_page_loads for r in report.rows)
    worst = max(r.stats.pages_read for r in report.rows)
    elapsed = time.perf_counter() - t0
    note(record_property, f"max loads of one page per epoch={max_loads} (<=2); "
                          f"max epoch page reads={worst} vs dataset pages={dataset_pages} "
                          f"(ratio {worst / dataset_pages:.3f} <= 2); {elapsed:.1f}s")
    assert max_loads <= 2
    assert worst <= 2 * dataset_pages
    assert elapsed < 30


# 4 and 5 ------------------------------------------------------------------

@pytest.mark.criterion(4)
@pytest.mark.slow
def test_convergence_ordering(convergence_runs, record_property):
    runs, elapsed = convergence_runs
    med = {}
    for s in CONVERGENCE_STRATEGIES:
        epochs = [runs[s, seed].epochs_to_target for seed in SEEDS]
        assert None not in epochs, f"{s.value} missed the target: {epochs}"
        med[s] = statistics.median(epochs)
    note(record_property, "median epochs_to_target " + ", ".join(f"{s.value}={med[s]:g}" for s in med)
         + f"; {elapsed:.0f}s")
    assert med[Strategy.LIRS_INSTANCE] <= med[Strategy.BMF] <= med[Strategy.NONE]
    assert med[Strategy.LIRS_PAGE] <= med[Strategy.BMF]
    assert elapsed < 300


@pytest.mark.criterion(5)
@pytest.mark.slow
def test_cost_model_device_ordering(convergence_runs, record_property):
    runs, _ = convergence_runs
    t0 = time.perf_counter()

    def median(strategy, device, field):
        values = []
        for seed in SEEDS:
            tm = runs[strategy, seed].retime(PROFILES[device]).time_model()
            values.append(getattr(tm, field) if field != "total" else runs[strategy, seed]
                          .retime(PROFILES[device]).total_time())
        return statistics.median(values)

    load_ratio = median(Strategy.LIRS_INSTANCE, "hdd", "t_load") / median(Strategy.BMF, "hdd", "t_load")
    totals = {s: median(s, "optane", "total") for s in (Strategy.BMF, Strategy.LIRS_INSTANCE, Strategy.LIRS_PAGE)}
    elapsed = time.perf_counter() - t0
    note(record_property, f"hdd load lirs-instance/bmf={load_ratio:.1f}x (>=10); optane total "
                          f"lirs-page={totals[Strategy.LIRS_PAGE]:.4g}s bmf={totals[Strategy.BMF]:.4g}s "
                          f"(lirs-instance={totals[Strategy.LIRS_INSTANCE]:.4g}s, informational); {elapsed:.1f}s")
    assert load_ratio >= 10
    assert totals[Strategy.LIRS_PAGE] < totals[Strategy.BMF]
    assert elapsed < 10


# 6 ------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_memory_accounting(record_property):
    cases = [(200_000, 8, 1_600_000, "1.53"), (19_264_097, 8, 154_112_776, "147"), (1_281_167, 4, 5_124_668, "4.89")]
    shown = []
    for n, width, expected, mb in cases:
        got = assignment_table_bytes(n, width)
        decimals = len(mb.split(".")[1]) if "." in mb else 0
        shown.append(f"N={n}: {got} B = {got / MIB:.{decimals}f} MB")
        assert got == expected
        assert f"{got / MIB:.{decimals}f}" == mb
    note(record_property, "; ".join(shown))


# 7 ------------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_bounded_queue(record_property):
    t0 = time.perf_counter()
    n = 200
    rng = np.random.default_rng(0)
    assert list(queue_shuffle_stream(range(n), 1, rng)) == list(range(n))
    worst = {}
    for q in (2, 5, 50):
        worst[q] = 0
        for seed in range(1000):
            out = list(queue_shuffle_stream(range(n), q, np.random.default_rng([q, seed])))
            assert sorted(out) == list(range(n))
            lag = max(item - pos for pos, item in enumerate(out))
            assert lag <= q - 1, (q, seed)
            worst[q] = max(worst[q], lag)
    elapsed = time.perf_counter() - t0
    note(record_property, "q=1 keeps order; max(in_pos - out_pos) over 1000 seeds: "
         + ", ".join(f"q={q}: {w} (<= {q - 1})" for q, w in worst.items()) + f"; {elapsed:.1f}s")
    assert elapsed < 30


# 8 ------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for k in range(100):
        model, batch = random_case(rng, sparse=bool(k % 2))
        lam = float(rng.uniform(0, 0.1))
        for loss in Loss:
            gw, gb, _ = batch_gradient(model, batch, loss, lam)
            nw, nb = finite_difference_gradient(model, batch, loss, lam)
            worst = max(worst, max_relative_error(gw, nw), max_relative_error(gb, nb))
    elapsed = time.perf_counter() - t0
    note(record_property, f"100 pairs x 2 losses, worst per-coordinate relative error {worst:.2e} (< 1e-4); "
                          f"{elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30


# 9 ------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_total_time_consistency(tmp_path, record_property):
    t0 = time.perf_counter()
    path = tmp_path / "d.shfd"
    generate_synthetic(path, 3000, 30, "dense", seed=9)
    data = load_arrays(path)
    rows = []
    for s in Strategy:
        for overlap in ("none", "prefetch"):
            report = run_training(path, StrategyConfig(s, 10, queue_size=200), TrainConfig(max_epochs=3, overlap_mode=overlap),
                                  PROFILES["hdd"], cache_pages=16, workdir=tmp_path, eval_data=data)
            out = tmp_path / f"{s.value}_{overlap}.csv"
            summary = tmp_path / f"{s.value}_{overlap}_summary.csv"
            write_run_report(report, out, summary)
            rows.extend(read_csv(summary))
    for row in rows:
        assert recomputed_total(row) == float(row["total_time"])
        assert recomputed_total(row, "_wall") == float(row["total_time_wall"])

    # compute-bound prefetch: loading hides entirely behind computation
    heavy = TrainConfig(max_epochs=3, overlap_mode="prefetch", comp_sec_per_nnz=1e-3)
    report = run_training(path, StrategyConfig(Strategy.LIRS_INSTANCE, 10), heavy, PROFILES["hdd"],
                          cache_pages=16, eval_data=data)
    row = summary_row(report)
    assert row["t_comp"] > row["t_load"] > 0
    hidden = row["t_preprocess"] + row["t_comp"] * row["epochs"]
    elapsed = time.perf_counter() - t0
    note(record_property, f"{len(rows)} summaries recompute exactly; prefetch total={row['total_time']:.6g}s "
                          f"vs T_pre + T_comp*epochs={hidden:.6g}s; {elapsed:.1f}s")
    assert row["total_time"] == pytest.approx(hidden, rel=1e-12)
    assert elapsed < 5


# 10 -----------------------------------------------------------------------


@pytest.mark.criterion(10)
def test_lru_oracle(record_property):
    t0 = time.perf_counter()
    hit_rates = []
    for capacity in (1, 2, 8, 64):
        trace = np.random.default_rng(capacity).integers(0, 2 * capacity + 3, size=10_000).tolist()
        cache = PageCache(capacity)
        assert replay_matches(cache, trace, capacity) is None
        fresh = PageCache(capacity)
        ref_hits = sum(fresh.access(k) for k in trace)
        hit_rates.append(f"cap={capacity}: hits={ref_hits}")
    elapsed = time.perf_counter() - t0
    note(record_property, "10^4-access traces match the list LRU step by step (" + ", ".join(hit_rates)
         + f"); {elapsed:.1f}s")
    assert elapsed < 10
