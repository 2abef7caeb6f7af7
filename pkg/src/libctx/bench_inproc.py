"""Management-call latency rows, measured from inside an application
attached to an in-process monitor.  Prints "name,samples,mean_ns" lines.

Run as ``python -m libctx.bench_inproc``; the monitor attach is
once-per-process, hence the separate interpreter.
"""

from __future__ import annotations

import argparse
import sys
import time

from .cpuset import format_cpu_list
from .inprocess import Runtime
from .topology import read_host_topology


def _mean_ns(fn, samples: int) -> float:
    start = time.perf_counter_ns()
    for _ in range(samples):
        fn()
    return (time.perf_counter_ns() - start) / samples


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--create", type=int, default=100)
    parser.add_argument("--enter", type=int, default=1000)
    parser.add_argument("--forge-root", default=None)
    args = parser.parse_args(argv)

    online = read_host_topology().online
    all_cpus = format_cpu_list(online)

    rt = Runtime.initialize(forge_root=args.forge_root)

    create_ns = _mean_ns(lambda: rt.create_context(all_cpus), args.create)
    print(f"ctx_create,{args.create},{create_ns:.1f}")

    ctx = rt.create_context(all_cpus)

    enter_total = 0.0
    leave_total = 0.0
    for _ in range(args.enter):
        t0 = time.perf_counter_ns()
        rt.enter(ctx)
        t1 = time.perf_counter_ns()
        rt.exit()
        t2 = time.perf_counter_ns()
        enter_total += t1 - t0
        leave_total += t2 - t1
    print(f"ctx_enter,{args.enter},{enter_total / args.enter:.1f}")
    print(f"ctx_leave,{args.enter},{leave_total / args.enter:.1f}")

    samples = max(1, args.enter // 2)
    total = 0.0
    for _ in range(samples):
        t0 = time.perf_counter_ns()
        rt.enter(ctx, affinity=True)
        t1 = time.perf_counter_ns()
        rt.exit()
        total += t1 - t0
    print(f"ctx_enter_affinity,{samples},{total / samples:.1f}")

    rt.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
