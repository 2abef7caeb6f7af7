"""Grid-search auto-tuner: evaluate contiguous (k, N-k) core partitions for
two concurrent workloads and report the one minimizing the makespan (the
completion time of the slower workload).

Cells run sequentially to avoid cross-cell interference; within a cell the
two workloads run concurrently under one monitor.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .cpuset import CpuSet
from .errors import LibctxError
from .log import get_logger
from .monitor import Monitor

logger = get_logger("libctx.tuner")

CSV_HEADER = ["run_id", "k", "n_minus_k", "rep", "seconds"]


@dataclass(frozen=True)
class Partition:
    k: int
    cpus_a: CpuSet
    cpus_b: CpuSet


@dataclass
class TuneResult:
    partitions: list
    times: dict = field(default_factory=dict)  # (k, rep) -> seconds | None
    means: dict = field(default_factory=dict)  # k -> mean seconds
    best_k: Optional[int] = None

    def best_partition(self) -> Optional[Partition]:
        for p in self.partitions:
            if p.k == self.best_k:
                return p
        return None


def enumerate_partitions(online: CpuSet, grid_step: int = 1,
                         k_min: Optional[int] = None,
                         k_max: Optional[int] = None) -> list:
    """Contiguous partitions of the online cores: workload A gets the k
    lowest cores, workload B the rest, for k in {step, 2*step, ..., N-step},
    optionally clamped to a user-supplied [k_min, k_max] hint."""
    if grid_step < 1:
        raise LibctxError("grid step must be >= 1")
    cpus = list(online)
    n = len(cpus)
    if n < 2:
        raise LibctxError(f"tuning needs at least 2 online cpus (have {n})")
    partitions = []
    for k in range(grid_step, n, grid_step):
        if n - k < 1:
            continue
        if k_min is not None and k < k_min:
            continue
        if k_max is not None and k > k_max:
            continue
        partitions.append(
            Partition(k=k, cpus_a=CpuSet(cpus[:k]), cpus_b=CpuSet(cpus[k:]))
        )
    if not partitions:
        raise LibctxError("the partition grid is empty (check step and k-range hints)")
    return partitions


def _default_cell_runner(workload_a: list, workload_b: list,
                         partition: Partition,
                         forge_root: Optional[str] = None) -> Optional[float]:
    """Run both workloads concurrently under a partition; returns the
    makespan in seconds or None when either workload fails."""
    with Monitor(forge_root=forge_root) as monitor:
        ctx_a = monitor.create_context(partition.cpus_a)
        ctx_b = monitor.create_context(partition.cpus_b)
        devnull = os.open(os.devnull, os.O_WRONLY)
        try:
            task_a = monitor.spawn_supervised(workload_a, ctx_a, stdout=devnull)
            task_b = monitor.spawn_supervised(workload_b, ctx_b, stdout=devnull)
        finally:
            os.close(devnull)
        monitor.resume(task_a)
        monitor.resume(task_b)
        monitor.run()
        if task_a.exit_code != 0 or task_b.exit_code != 0:
            logger.warning(
                "cell k=%d failed: exits %s/%s", partition.k,
                task_a.exit_code, task_b.exit_code,
            )
            return None
        return max(task_a.wall_seconds, task_b.wall_seconds)


def _next_run_id(csv_path: str) -> int:
    if not os.path.exists(csv_path):
        return 1
    last = 0
    with open(csv_path, newline="") as f:
        for record in csv.DictReader(f):
            try:
                last = max(last, int(record["run_id"]))
            except (KeyError, TypeError, ValueError):
                continue
    return last + 1


def run_grid(workload_a: list, workload_b: list, online: CpuSet,
             grid_step: int = 1, reps: int = 3,
             k_min: Optional[int] = None, k_max: Optional[int] = None,
             csv_path: Optional[str] = None,
             cell_runner: Optional[Callable] = None,
             forge_root: Optional[str] = None) -> TuneResult:
    """Evaluate every partition ``reps`` times and pick the argmin of the
    per-partition mean makespan.  Failed cells are recorded as missing and
    excluded from the argmin.  CSV rows are appended with a fresh run id,
    never overwritten."""
    if reps < 1:
        raise LibctxError("reps must be >= 1")
    partitions = enumerate_partitions(online, grid_step, k_min, k_max)
    runner = cell_runner or (
        lambda a, b, p: _default_cell_runner(a, b, p, forge_root=forge_root)
    )
    result = TuneResult(partitions=partitions)

    writer = None
    csv_file = None
    run_id = 0
    if csv_path:
        run_id = _next_run_id(csv_path)
        fresh = not os.path.exists(csv_path)
        csv_file = open(csv_path, "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(CSV_HEADER)

    try:
        for rep in range(1, reps + 1):
            for partition in partitions:
                seconds = runner(workload_a, workload_b, partition)
                result.times[(partition.k, rep)] = seconds
                if writer:
                    writer.writerow([
                        run_id, partition.k, len(partition.cpus_b), rep,
                        f"{seconds:.6f}" if seconds is not None else "",
                    ])
                    csv_file.flush()
    finally:
        if csv_file:
            csv_file.close()

    for partition in partitions:
        samples = [
            result.times[(partition.k, rep)]
            for rep in range(1, reps + 1)
            if result.times.get((partition.k, rep)) is not None
        ]
        if samples:
            result.means[partition.k] = sum(samples) / len(samples)
    if result.means:
        result.best_k = min(result.means, key=lambda k: (result.means[k], k))
    return result


def argmin_from_csv(csv_path: str, run_id: Optional[int] = None) -> Optional[int]:
    """Recompute the best k from an emitted CSV (the result must match
    TuneResult.best_k exactly)."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    with open(csv_path, newline="") as f:
        for record in csv.DictReader(f):
            if run_id is not None and int(record["run_id"]) != run_id:
                continue
            if not record["seconds"]:
                continue
            k = int(record["k"])
            sums[k] = sums.get(k, 0.0) + float(record["seconds"])
            counts[k] = counts.get(k, 0) + 1
    if not sums:
        return None
    means = {k: sums[k] / counts[k] for k in sums}
    return min(means, key=lambda k: (means[k], k))
