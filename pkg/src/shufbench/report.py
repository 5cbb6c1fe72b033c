"""CSV reports for single runs and sweeps.

Per-epoch report columns:
    epoch, objective, rfvd, t_load_sim, t_load_wall, t_comp_wall,
    pages_seq, pages_rand, cache_hits, redundant_loads, t_comp_sim

Summary columns (one row per run and device): see SUMMARY_COLUMNS. Times are
seconds; the simulated ones come from the device cost model, the `_wall` ones
from the host clock. total_time is always
t_preprocess + (t_load + t_comp - t_overlapping) * epochs over the same row.
"""
from __future__ import annotations

import csv
import statistics

from .trainer import ConvergenceReport, TimeModel, total_time

EPOCH_COLUMNS = ["epoch", "objective", "rfvd", "t_load_sim", "t_load_wall", "t_comp_wall",
                 "pages_seq", "pages_rand", "cache_hits", "redundant_loads", "t_comp_sim"]

SUMMARY_COLUMNS = ["strategy", "device", "seed", "overlap", "epochs", "epochs_to_target", "f_star",
                   "final_rfvd", "t_preprocess", "t_load", "t_comp", "t_overlapping", "total_time",
                   "t_preprocess_wall", "t_load_wall", "t_comp_wall", "t_overlapping_wall",
                   "total_time_wall", "pages_seq", "pages_rand", "pages_written", "cache_hits",
                   "redundant_loads"]

WALL_COLUMNS = {"t_load_wall", "t_comp_wall", "t_preprocess_wall", "t_overlapping_wall", "total_time_wall"}


class ReportInconsistent(AssertionError):
    pass


def epoch_rows(report: ConvergenceReport) -> list[dict]:
    return [{
        "epoch": r.epoch, "objective": r.objective, "rfvd": r.rfvd,
        "t_load_sim": r.t_load_sim, "t_load_wall": r.t_load_wall, "t_comp_wall": r.t_comp_wall,
        "pages_seq": r.stats.pages_read_seq, "pages_rand": r.stats.pages_read_rand,
        "cache_hits": r.stats.page_cache_hits, "redundant_loads": r.stats.redundant_page_loads,
        "t_comp_sim": r.t_comp_sim,
    } for r in report.rows]


def summary_row(report: ConvergenceReport) -> dict:
    sim, wall = report.time_model(True), report.time_model(False)
    stats = report.total_stats
    row = {
        "strategy": report.strategy.value, "device": report.profile.name, "seed": report.seed,
        "overlap": report.overlap_mode.value, "epochs": report.epochs,
        "epochs_to_target": "" if report.epochs_to_target is None else report.epochs_to_target,
        "f_star": report.f_star,
        "final_rfvd": report.rows[-1].rfvd if report.rows else "",
        "t_preprocess": sim.t_preprocess, "t_load": sim.t_load, "t_comp": sim.t_comp,
        "t_overlapping": sim.t_overlapping, "total_time": total_time(sim),
        "t_preprocess_wall": wall.t_preprocess, "t_load_wall": wall.t_load, "t_comp_wall": wall.t_comp,
        "t_overlapping_wall": wall.t_overlapping, "total_time_wall": total_time(wall),
        "pages_seq": stats.pages_read_seq, "pages_rand": stats.pages_read_rand,
        "pages_written": stats.pages_written_seq + stats.pages_written_rand,
        "cache_hits": stats.page_cache_hits, "redundant_loads": stats.redundant_page_loads,
    }
    check_summary_row(row)
    return row


def recomputed_total(row: dict, suffix: str = "") -> float:
    """Total training time rebuilt from a summary row's own component columns."""
    tm = TimeModel(float(row["t_preprocess" + suffix]), float(row["t_load" + suffix]),
                   float(row["t_comp" + suffix]), float(row["t_overlapping" + suffix]), int(row["epochs"]))
    return total_time(tm)


def check_summary_row(row: dict):
    """Raise unless both totals equal the recomputed total exactly, as written to text."""
    for suffix in ("", "_wall"):
        text_row = {k: str(v) for k, v in row.items()}
        if recomputed_total(text_row, suffix) != float(text_row["total_time" + suffix]):
            raise ReportInconsistent(f"total_time{suffix} disagrees with its components: {row}")


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run_report(report: ConvergenceReport, epochs_path, summary_path):
    write_csv(epochs_path, EPOCH_COLUMNS, epoch_rows(report))
    write_csv(summary_path, SUMMARY_COLUMNS, [summary_row(report)])


SWEEP_COLUMNS = ["strategy", "device", "seed", "epochs", "epochs_to_target", "total_time", "normalized"]
SWEEP_TABLE_COLUMNS = ["strategy", "device", "runs", "failed", "median_total_time", "normalized"]


def normalize_sweep(cells: list[dict], baseline: tuple[str, str]) -> list[dict]:
    """Fill `normalized` for each per-seed cell; cells with total_time None render as FAIL."""
    base = {c["seed"]: c["total_time"] for c in cells
            if (c["strategy"], c["device"]) == baseline and c["total_time"] is not None}
    out = []
    for c in cells:
        c = dict(c)
        b = base.get(c["seed"])
        if c["total_time"] is None:
            c["total_time"] = c["normalized"] = "FAIL"
        elif b is None or b == 0:
            c["normalized"] = "FAIL"
        else:
            c["normalized"] = c["total_time"] / b
        out.append(c)
    return out


def sweep_table(normalized_cells: list[dict]) -> list[dict]:
    """Median over seeds for each (strategy, device) cell."""
    groups: dict = {}
    for c in normalized_cells:
        groups.setdefault((c["strategy"], c["device"]), []).append(c)
    table = []
    for (strategy, device), cells in groups.items():
        ok = [c for c in cells if c["normalized"] != "FAIL"]
        row = {"strategy": strategy, "device": device, "runs": len(cells), "failed": len(cells) - len(ok)}
        if ok:
            row["median_total_time"] = statistics.median(c["total_time"] for c in ok)
            row["normalized"] = statistics.median(c["normalized"] for c in ok)
        else:
            row["median_total_time"] = row["normalized"] = "FAIL"
        table.append(row)
    return table
