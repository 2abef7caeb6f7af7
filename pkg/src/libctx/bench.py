"""Overhead microbenchmarks: syscall latency rows measured inside a C
helper (run both supervised and bare), plus management-call rows measured
by an in-process child.
"""

from __future__ import annotations

import csv
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from typing import Optional

from .cpuset import CpuSet
from .errors import LibctxError
from .helpers import helper_path
from .monitor import Monitor

SYSCALL_ROWS = ("getaffinity", "open", "mmap")
ROW_LABELS = {
    "getaffinity": "affinity query",
    "open": "resource-file open",
    "mmap": "mmap",
}
MANAGEMENT_ROWS = ("ctx_create", "ctx_enter", "ctx_leave", "ctx_enter_affinity")


@dataclass
class BenchRow:
    name: str
    mode: str  # traced | untraced | api
    samples: int
    mean_us: float


def _parse_helper_line(out: str) -> tuple:
    line = out.strip().splitlines()[-1]
    row, samples, mean_ns = line.split(",")
    return row, int(samples), float(mean_ns) / 1000.0


def run_syscall_row(row: str, samples: int, traced: bool,
                    forge_root: Optional[str] = None) -> BenchRow:
    """One latency row; when traced, the helper runs under a restricted
    context so interposition does real work."""
    if row not in SYSCALL_ROWS:
        raise LibctxError(f"unknown bench row {row!r}")
    bench = helper_path("bench")
    argv = [bench, row, str(samples)]
    if not traced:
        out = subprocess.run(argv, capture_output=True, text=True, check=True).stdout
    else:
        with Monitor(forge_root=forge_root) as monitor:
            first_cpu = next(iter(monitor.online))
            ctx = monitor.create_context(CpuSet([first_cpu]))
            read_fd, write_fd = os.pipe()
            try:
                task = monitor.spawn_supervised(argv, ctx, stdout=write_fd)
                os.close(write_fd)
                write_fd = -1
                monitor.resume(task)
                monitor.run()
                if task.exit_code != 0:
                    raise LibctxError(f"bench helper failed under supervision ({task.exit_code})")
                out = b""
                while True:
                    chunk = os.read(read_fd, 65536)
                    if not chunk:
                        break
                    out += chunk
                out = out.decode()
            finally:
                if write_fd >= 0:
                    os.close(write_fd)
                os.close(read_fd)
    name, got_samples, mean_us = _parse_helper_line(out)
    return BenchRow(name=name, mode="traced" if traced else "untraced",
                    samples=got_samples, mean_us=mean_us)


def run_management_rows(create_samples: int = 100, enter_samples: int = 1000,
                        forge_root: Optional[str] = None) -> list:
    """Run the in-process management benchmark in a fresh interpreter (the
    monitor attach is once-per-process)."""
    argv = [
        sys.executable, "-m", "libctx.bench_inproc",
        "--create", str(create_samples),
        "--enter", str(enter_samples),
    ]
    env = dict(os.environ)
    if forge_root:
        argv += ["--forge-root", forge_root]
    result = subprocess.run(argv, capture_output=True, text=True, env=env)
    if result.returncode != 0:
        raise LibctxError(
            f"management benchmark failed ({result.returncode}):\n{result.stderr}"
        )
    rows = []
    for line in result.stdout.strip().splitlines():
        name, samples, mean_ns = line.split(",")
        rows.append(BenchRow(name=name, mode="api", samples=int(samples),
                             mean_us=float(mean_ns) / 1000.0))
    return rows


def run_all(samples: int = 120000, create_samples: int = 100,
            enter_samples: int = 1000, forge_root: Optional[str] = None,
            management: bool = True) -> list:
    rows = []
    for row in SYSCALL_ROWS:
        rows.append(run_syscall_row(row, samples, traced=False, forge_root=forge_root))
        rows.append(run_syscall_row(row, samples, traced=True, forge_root=forge_root))
    if management:
        rows.extend(run_management_rows(create_samples, enter_samples, forge_root))
    return rows


def format_table(rows: list) -> str:
    lines = []
    width = max(len(_row_label(r)) for r in rows) + 2
    for row in rows:
        lines.append(f"{_row_label(row):<{width}}{row.mean_us:10.2f} us")
    return "\n".join(lines)


def _row_label(row: BenchRow) -> str:
    base = ROW_LABELS.get(row.name, row.name)
    if row.mode == "traced":
        return f"{base} (supervised)"
    if row.mode == "untraced":
        return f"{base} (bare)"
    return base


def write_csv(rows: list, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "mode", "samples", "mean_us"])
        for row in rows:
            writer.writerow([row.name, row.mode, row.samples, f"{row.mean_us:.3f}"])
