"""Command-line front end.

    libctx run --config run.json [--trace-all]
    libctx bench [--samples N] [--csv out.csv]
    libctx tune --a "workload a ..." --b "workload b ..." --csv grid.csv
                [--grid-step K] [--reps R] [--k-min K] [--k-max K]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import shlex
import signal
import sys

from .bench import format_table, run_all, write_csv
from .config import load_config
from .cpuset import parse_cpu_list
from .errors import ConfigError, CpuListParseError, LibctxError
from .log import get_logger
from .monitor import Monitor
from .topology import read_host_topology
from .tuner import run_grid

logger = get_logger("libctx.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def cmd_run(args) -> int:
    config = load_config(args.config)
    trace_all = args.trace_all or config.trace_all
    monitor = Monitor(forge_root=config.forge_root, trace_all=trace_all)
    tasks = {}

    def _terminate(signum, frame):
        monitor.close()
        sys.exit(EXIT_RUNTIME)

    old_handlers = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        old_handlers[sig] = signal.signal(sig, _terminate)
    try:
        online = monitor.online
        for spec in config.contexts:
            allowed = parse_cpu_list(spec.cpus)
            if not allowed.issubset(online):
                raise ConfigError(
                    f"context {spec.name!r} requests cpus outside the online set"
                )
            ctx = monitor.create_context(allowed)
            for name, value in spec.env.items():
                if value is None:
                    monitor.unsetenv(ctx, name)
                else:
                    monitor.setenv(ctx, name, value)
            tasks[spec.name] = monitor.spawn_supervised(spec.argv, ctx)
        for task in tasks.values():
            monitor.resume(task)
        monitor.run()
    finally:
        monitor.close()
        for sig, handler in old_handlers.items():
            signal.signal(sig, handler)

    status = EXIT_OK
    for name, task in tasks.items():
        print(f"{name}\t{task.wall_seconds:.3f}")
        if task.exit_code != 0:
            logger.info("context %s exited with %s", name, task.exit_code)
            status = EXIT_RUNTIME
    return status


def cmd_bench(args) -> int:
    rows = run_all(
        samples=args.samples,
        create_samples=args.create_samples,
        enter_samples=args.enter_samples,
        management=not args.skip_management,
    )
    print(format_table(rows))
    if args.csv:
        write_csv(rows, args.csv)
        print(f"csv written to {args.csv}")
    return EXIT_OK


def cmd_tune(args) -> int:
    workload_a = shlex.split(args.a)
    workload_b = shlex.split(args.b)
    if not workload_a or not workload_b:
        raise ConfigError("both workloads need a non-empty command line")
    online = read_host_topology().online
    result = run_grid(
        workload_a,
        workload_b,
        online=online,
        grid_step=args.grid_step,
        reps=args.reps,
        k_min=args.k_min,
        k_max=args.k_max,
        csv_path=args.csv,
    )
    if result.best_k is None:
        print("no partition completed successfully", file=sys.stderr)
        return EXIT_RUNTIME
    best = result.best_partition()
    n = len(online)
    print(f"partitions evaluated: {len(result.partitions)} x {args.reps} reps")
    for partition in result.partitions:
        mean = result.means.get(partition.k)
        shown = f"{mean:.3f}s" if mean is not None else "failed"
        print(f"  k={partition.k:<4d} ({partition.k}/{n - partition.k}): {shown}")
    print(f"best: k={best.k} (A on {best.k} cores, B on {n - best.k} cores)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="libctx",
        description="Partition CPU resources among supervised workloads",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run workloads under partitioned contexts")
    p_run.add_argument("--config", required=True, help="JSON run configuration")
    p_run.add_argument("--trace-all", action="store_true",
                       help="trace every syscall instead of installing the filter")
    p_run.set_defaults(fn=cmd_run)

    p_bench = sub.add_parser("bench", help="measure interposition overhead")
    p_bench.add_argument("--samples", type=int, default=120000,
                         help="samples per syscall row (default 120000)")
    p_bench.add_argument("--create-samples", type=int, default=100)
    p_bench.add_argument("--enter-samples", type=int, default=1000)
    p_bench.add_argument("--skip-management", action="store_true")
    p_bench.add_argument("--csv", help="also write rows as CSV")
    p_bench.set_defaults(fn=cmd_bench)

    p_tune = sub.add_parser("tune", help="grid-search core partitions for two workloads")
    p_tune.add_argument("--a", required=True, help="workload A command line")
    p_tune.add_argument("--b", required=True, help="workload B command line")
    p_tune.add_argument("--grid-step", type=int, default=1)
    p_tune.add_argument("--reps", type=int, default=3)
    p_tune.add_argument("--k-min", type=int, default=None,
                        help="narrow the search: smallest k to try")
    p_tune.add_argument("--k-max", type=int, default=None,
                        help="narrow the search: largest k to try")
    p_tune.add_argument("--csv", required=True, help="grid results CSV (appended)")
    p_tune.set_defaults(fn=cmd_tune)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CpuListParseError) as exc:
        print(f"libctx: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LibctxError as exc:
        print(f"libctx: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
