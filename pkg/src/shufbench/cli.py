"""Command-line entry point: gen, index, run, sweep.

Exit codes: 0 success, 2 usage or validation error, 3 runtime/I-O failure,
4 training diverged.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import sys
from pathlib import Path

from . import report as rpt
from .dataset import build_offset_table, generate_synthetic, load_arrays, sidecar_path
from .records import DatasetError
from .shuffle import Strategy, StrategyConfig
from .storage import StorageContext, load_profile
from .trainer import Batch, TrainConfig, TrainingDiverged, reference_objective, run_training

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _existing(args, p) -> Path:
    path = _path(args, p)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    return path


def cmd_gen(args):
    out = _path(args, args.out)
    if args.format == "sparse" and args.nnz is not None and not 1 <= args.nnz <= args.f:
        raise UsageError(f"--nnz must be between 1 and --f ({args.f})")
    header = generate_synthetic(out, args.n, args.f, args.format, args.nnz, args.margin, args.seed, args.align)
    print(f"N={header.num_instances} F={header.num_features} {header.format.name.lower()} -> {out}")


def cmd_index(args):
    path = _existing(args, args.dataset)
    ctx = StorageContext(page_size=args.page_size, cache_pages=args.cache_pages)
    table = build_offset_table(path, ctx)
    out = _path(args, args.out) if args.out else sidecar_path(path)
    table.save(out)
    print(f"entries={len(table)} pages_scanned={ctx.stats.pages_read} -> {out}")


def _strategy_config(args, strategy=None, seed=None) -> StrategyConfig:
    return StrategyConfig(strategy or args.strategy, args.batches, args.q, args.page_size,
                          args.seed if seed is None else seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(args.lr, args.lam, args.loss, args.max_epochs, args.target_rfvd, args.overlap)


def _f_star(args, eval_data):
    header, y, X = eval_data
    return reference_objective(Batch(y, X, header.num_features), args.loss, args.lam)


def cmd_run(args):
    path = _existing(args, args.dataset)
    profile = load_profile(args.device if args.device in ("hdd", "ssd", "optane") else _path(args, args.device))
    strategy, train = _strategy_config(args), _train_config(args)
    eval_data = load_arrays(path)
    trace = [] if args.trace else None
    report = run_training(path, strategy, train, profile, args.cache_pages, workdir=Path(args.workdir),
                          f_star=_f_star(args, eval_data), eval_data=eval_data, trace=trace)
    out = _path(args, args.out)
    summary_out = out.with_name(out.stem + "_summary.csv")
    rpt.write_run_report(report, out, summary_out)
    if trace is not None:
        with open(_path(args, args.trace), "w") as fh:
            for epoch, k, ids in trace:
                fh.writelines(f"{epoch},{k},{i}\n" for i in ids.tolist())
    row = rpt.summary_row(report)
    print(f"{row['strategy']} on {row['device']}: epochs={row['epochs']} "
          f"target_at={row['epochs_to_target'] or 'none'} total_time={row['total_time']:.6g}s "
          f"-> {out}, {summary_out}")


def _sweep_cell(path, strategy, train, cache_pages, workdir, f_star, devices):
    eval_data = load_arrays(path)
    try:
        report = run_training(path, strategy, train, devices[0], cache_pages, workdir=workdir,
                              f_star=f_star, eval_data=eval_data)
    except (TrainingDiverged, OSError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return [rpt.summary_row(report.retime(d)) for d in devices], None


def cmd_sweep(args):
    path = _existing(args, args.dataset)
    strategies = [Strategy(s) for s in args.strategies.split(",")]
    devices = [load_profile(d if d in ("hdd", "ssd", "optane") else _path(args, d))
               for d in args.devices.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    base_strategy, _, base_device = args.baseline.partition(":")
    if Strategy(base_strategy) not in strategies or base_device not in [d.name for d in devices]:
        raise UsageError(f"baseline {args.baseline} is not a sweep cell")
    train = _train_config(args)
    eval_data = load_arrays(path)
    f_star = _f_star(args, eval_data)
    jobs = [(s, seed) for s in strategies for seed in seeds]
    workdir = Path(args.workdir)

    def submit(run):
        return {job: run(path, _strategy_config(args, job[0], job[1]), train, args.cache_pages,
                         workdir, f_star, devices) for job in jobs}

    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(args.parallel) as pool:
            futures = submit(lambda *a: pool.submit(_sweep_cell, *a))
            results = {job: fut.result() for job, fut in futures.items()}
    else:
        results = submit(_sweep_cell)

    cells, summaries = [], []
    for (strategy, seed), (rows, err) in results.items():
        if err:
            print(f"cell {strategy.value} seed={seed} failed: {err}", file=sys.stderr)
        for d in devices:
            row = next((r for r in rows if r["device"] == d.name), None) if rows else None
            if row is not None:
                if args.parallel > 1:
                    for col in rpt.WALL_COLUMNS:
                        row[col] = ""
                summaries.append(row)
            cells.append({"strategy": strategy.value, "device": d.name, "seed": seed,
                          "epochs": row["epochs"] if row else "",
                          "epochs_to_target": row["epochs_to_target"] if row else "",
                          "total_time": row["total_time"] if row else None})
    cells = rpt.normalize_sweep(cells, (base_strategy, base_device))
    out = _path(args, args.out)
    rpt.write_csv(out, rpt.SWEEP_COLUMNS, cells)
    rpt.write_csv(out.with_name(out.stem + "_table.csv"), rpt.SWEEP_TABLE_COLUMNS, rpt.sweep_table(cells))
    rpt.write_csv(out.with_name(out.stem + "_runs.csv"), rpt.SUMMARY_COLUMNS, summaries)
    for row in rpt.sweep_table(cells):
        norm = row["normalized"]
        print(f"{row['strategy']:>14} {row['device']:>7} "
              f"{norm if isinstance(norm, str) else f'{norm:.4f}'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shufbench", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic separable dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--f", type=int, required=True)
    g.add_argument("--format", choices=["dense", "sparse"], default="dense")
    g.add_argument("--nnz", type=int, default=None, help="max nonzeros per sparse record")
    g.add_argument("--margin", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--align", type=int, default=None, help="start records at a multiple of this many bytes")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("index", help="build the offset-table sidecar")
    i.add_argument("--dataset", required=True)
    i.add_argument("--out", default=None)
    i.add_argument("--page-size", type=int, default=4096)
    i.add_argument("--cache-pages", type=int, default=1024)
    i.set_defaults(func=cmd_index)

    def training_flags(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--batches", type=int, default=50)
        p.add_argument("--q", type=int, default=10000, help="queue size for the queue strategy")
        p.add_argument("--page-size", type=int, default=4096)
        p.add_argument("--cache-pages", type=int, default=1024)
        p.add_argument("--target-rfvd", type=float, default=1e-2)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--lr", type=float, default=1.0)
        p.add_argument("--lam", type=float, default=1e-3)
        p.add_argument("--loss", choices=["logistic", "squared-hinge"], default="logistic")
        p.add_argument("--max-epochs", type=int, default=30)
        p.add_argument("--overlap", choices=["none", "prefetch"], default="none")
        p.add_argument("--out", required=True)

    r = sub.add_parser("run", help="train once and write per-epoch and summary reports")
    training_flags(r)
    r.add_argument("--strategy", choices=[s.value for s in Strategy], required=True)
    r.add_argument("--device", default="optane", help="hdd, ssd, optane or a profile file")
    r.add_argument("--trace", default=None, help="write epoch,batch_index,instance_id lines here")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="strategies x devices x seeds, normalized to a baseline cell")
    training_flags(s)
    s.add_argument("--strategies", default="bmf,lirs-instance")
    s.add_argument("--devices", default="hdd,ssd,optane")
    s.add_argument("--seeds", default="0")
    s.add_argument("--baseline", required=True, help="STRATEGY:DEVICE, e.g. bmf:hdd")
    s.add_argument("--parallel", type=int, default=1, help="worker processes; drops wall-clock columns")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
