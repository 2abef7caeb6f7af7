"""Classic-BPF syscall filter: trap the resource-management syscalls, allow
everything else.

The program inspects the seccomp data buffer (nr at offset 0, arch at 4),
returns TRACE for the targeted set {sched_getaffinity, sched_setaffinity,
openat, open} on the native ABI and ALLOW for anything else, including
foreign ABIs.  Both open and openat are filtered because older loaders
still use open.
"""

from __future__ import annotations

import platform
import struct

SECCOMP_RET_TRACE = 0x7FF00000
SECCOMP_RET_ALLOW = 0x7FFF0000

AUDIT_ARCH_X86_64 = 0xC000003E
AUDIT_ARCH_AARCH64 = 0xC00000B7

BPF_LD_W_ABS = 0x20
BPF_JMP_JEQ_K = 0x15
BPF_RET_K = 0x06

_SECCOMP_DATA_NR = 0
_SECCOMP_DATA_ARCH = 4

# Per-architecture numbers of the targeted syscalls.  aarch64 has no open(2).
SYSCALLS_X86_64 = {
    "open": 2,
    "sched_setaffinity": 203,
    "sched_getaffinity": 204,
    "openat": 257,
}
SYSCALLS_AARCH64 = {
    "openat": 56,
    "sched_setaffinity": 122,
    "sched_getaffinity": 123,
}

_ARCHES = {
    "x86_64": (AUDIT_ARCH_X86_64, SYSCALLS_X86_64),
    "aarch64": (AUDIT_ARCH_AARCH64, SYSCALLS_AARCH64),
}


def native_arch() -> str:
    return platform.machine()


def target_syscalls(arch: str | None = None) -> dict:
    arch = arch or native_arch()
    if arch not in _ARCHES:
        raise ValueError(f"unsupported architecture {arch!r}")
    return dict(_ARCHES[arch][1])


def insn(code: int, jt: int, jf: int, k: int) -> bytes:
    """One struct sock_filter, packed little-endian."""
    return struct.pack("<HBBI", code, jt, jf, k & 0xFFFFFFFF)


def build_trace_filter(arch: str | None = None) -> bytes:
    """Build the filter program as packed sock_filter instructions."""
    arch = arch or native_arch()
    if arch not in _ARCHES:
        raise ValueError(f"unsupported architecture {arch!r}")
    audit_arch, table = _ARCHES[arch]
    numbers = sorted(table.values())
    n = len(numbers)
    # Layout: [ld arch, jeq arch, ld nr, jeq nr_0..nr_{n-1}, ALLOW, TRACE]
    # so ALLOW sits at index 3+n and TRACE at 4+n.
    prog = [insn(BPF_LD_W_ABS, 0, 0, _SECCOMP_DATA_ARCH)]
    # Foreign-ABI syscalls fall through to ALLOW: this filter narrows
    # visibility, it is not a sandbox.
    prog.append(insn(BPF_JMP_JEQ_K, 0, n + 1, audit_arch))
    prog.append(insn(BPF_LD_W_ABS, 0, 0, _SECCOMP_DATA_NR))
    for i, nr in enumerate(numbers):
        prog.append(insn(BPF_JMP_JEQ_K, n - i, 0, nr))
    prog.append(insn(BPF_RET_K, 0, 0, SECCOMP_RET_ALLOW))
    prog.append(insn(BPF_RET_K, 0, 0, SECCOMP_RET_TRACE))
    return b"".join(prog)


def disassemble(program: bytes) -> list:
    """Unpack a packed program back into (code, jt, jf, k) tuples."""
    if len(program) % 8:
        raise ValueError("program length not a multiple of 8")
    return [struct.unpack("<HBBI", program[i:i + 8]) for i in range(0, len(program), 8)]
