"""Per-syscall interposition logic: forge affinity replies, clamp affinity
requests, and redirect resource-file opens.

The decision functions here are pure (mask algebra, path matching) so they
can be tested exhaustively; the monitor applies their outcomes to stopped
tasks.
"""

from __future__ import annotations

import errno
import os
from dataclasses import dataclass
from typing import Callable, Optional

from .cpuset import CpuSet, decode_kernel_mask, encode_kernel_mask, required_mask_bytes
from .registry import Context
from .topology import CPUINFO_PATH, ONLINE_PATH

#: Bytes kept free below the stack pointer before the redirect scratch
#: region (the ABI red zone).
RED_ZONE = 128

#: Size of the scratch region used for redirected path strings.
SCRATCH_BYTES = 1024


@dataclass(frozen=True)
class RedirectRule:
    """Map one canonical absolute path to a per-context forged path."""

    canonical_path: str
    forged_path_provider: Callable[[int], str]

    def __post_init__(self):
        if not os.path.isabs(self.canonical_path):
            raise ValueError(f"redirect path must be absolute: {self.canonical_path!r}")
        normalized = os.path.normpath(self.canonical_path)
        if normalized != self.canonical_path:
            raise ValueError(
                f"redirect path must be normalized: {self.canonical_path!r}"
            )


def default_rules(forged_path: Callable[[int, str], str]) -> list:
    """The stock rule set: /proc/cpuinfo and the sysfs online file.

    /proc/stat and cgroup files are intentionally not forged.
    """
    return [
        RedirectRule(CPUINFO_PATH, lambda ctx_id: forged_path(ctx_id, CPUINFO_PATH)),
        RedirectRule(ONLINE_PATH, lambda ctx_id: forged_path(ctx_id, ONLINE_PATH)),
    ]


# --- pure decision cores --------------------------------------------------

PASS = "pass"
REWRITE = "rewrite"
REJECT = "reject"


def clamp_affinity_request(requested: CpuSet, allowed: CpuSet) -> tuple:
    """Clamp model: effective = requested & allowed; empty means EINVAL.

    Returns (PASS, requested) when no rewrite is needed, (REWRITE,
    effective) when the intersection is a proper subset, and (REJECT,
    empty) when the caller asked only for cpus outside its allowance.
    """
    effective = requested & allowed
    if not effective:
        return (REJECT, effective)
    if effective == requested:
        return (PASS, requested)
    return (REWRITE, effective)


def forge_affinity_reply(ctx: Context, online: CpuSet, buffer_len: int, retval: int) -> bytes:
    """Reply bytes for a successful sched_getaffinity: the context's
    allowance, encoded to min(buffer_len, retval) bytes.

    The encoded full-width reply is cached per context and invalidated on
    set_allowed_cpus.
    """
    visible = ctx.allowed & online
    if ctx.affinity_cache is None or len(ctx.affinity_cache) < required_mask_bytes(visible):
        ctx.affinity_cache = encode_kernel_mask(visible, 128)
    return ctx.affinity_cache[: min(buffer_len, retval)]


def match_redirect(path: bytes, rules: list, cwd_of_dirfd: Optional[str] = None) -> Optional[RedirectRule]:
    """Match an open(at) pathname against the redirect rules.

    Relative paths are resolved against ``cwd_of_dirfd`` (the directory the
    tracee's dirfd points at) before normalization.  Non-matching paths are
    left untouched by the caller.
    """
    try:
        text = path.decode("utf-8", "surrogateescape")
    except Exception:
        return None
    if not os.path.isabs(text):
        if cwd_of_dirfd is None:
            return None
        text = os.path.join(cwd_of_dirfd, text)
    normalized = os.path.normpath(text)
    for rule in rules:
        if normalized == rule.canonical_path:
            return rule
    return None


def resolve_tracee_dirfd(tid: int, dirfd: int) -> Optional[str]:
    """Resolve an openat dirfd through the tracee's /proc fd links."""
    AT_FDCWD = -100
    try:
        if dirfd == AT_FDCWD:
            return os.readlink(f"/proc/{tid}/cwd")
        return os.readlink(f"/proc/{tid}/fd/{dirfd}")
    except OSError:
        return None


def scratch_address(stack_pointer: int) -> int:
    """Scratch region for redirected paths: below the red zone, bounded."""
    return stack_pointer - RED_ZONE - SCRATCH_BYTES


EINVAL = -errno.EINVAL


def decode_affinity_args(args: tuple) -> tuple:
    """(pid, len, buf_ptr) out of the raw syscall arguments."""
    pid = args[0] & 0xFFFFFFFF
    if pid >= 0x80000000:  # negative pid_t
        pid = pid - 0x100000000
    return pid, args[1], args[2]


def requested_mask_from_bytes(data: bytes) -> CpuSet:
    return decode_kernel_mask(data)
