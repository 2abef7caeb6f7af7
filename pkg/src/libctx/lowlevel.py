"""Thin ctypes layer over the kernel facilities the monitor depends on:
ptrace, seccomp filter installation, raw affinity syscalls, and tracee
memory access.

x86_64 only for the tracing side; the filter and shim generators support
aarch64 as data, but register decoding here is System V AMD64.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import os
import platform
import signal

from .cpuset import CpuSet, decode_kernel_mask, encode_kernel_mask
from .errors import FilterError, MonitorError

libc = ctypes.CDLL(None, use_errno=True)

libc.ptrace.restype = ctypes.c_long
libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
libc.syscall.restype = ctypes.c_long
libc.process_vm_readv.restype = ctypes.c_ssize_t
libc.process_vm_writev.restype = ctypes.c_ssize_t

# ptrace requests
PTRACE_TRACEME = 0
PTRACE_PEEKDATA = 2
PTRACE_POKEDATA = 5
PTRACE_CONT = 7
PTRACE_KILL = 8
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_ATTACH = 16
PTRACE_DETACH = 17
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201
PTRACE_SEIZE = 0x4206
PTRACE_INTERRUPT = 0x4207

# ptrace options
O_TRACESYSGOOD = 0x01
O_TRACEFORK = 0x02
O_TRACEVFORK = 0x04
O_TRACECLONE = 0x08
O_TRACEEXEC = 0x10
O_TRACEEXIT = 0x40
O_TRACESECCOMP = 0x80
O_EXITKILL = 0x100000

# ptrace event codes (status >> 16)
EVENT_FORK = 1
EVENT_VFORK = 2
EVENT_CLONE = 3
EVENT_EXEC = 4
EVENT_VFORK_DONE = 5
EVENT_EXIT = 6
EVENT_SECCOMP = 7
EVENT_STOP = 128

SYSCALL_TRAP = signal.SIGTRAP | 0x80

WALL = 0x40000000

PR_SET_NO_NEW_PRIVS = 38
PR_SET_PTRACER = 0x59616D61

SECCOMP_SET_MODE_FILTER = 1
SECCOMP_FILTER_FLAG_TSYNC = 1

ENOSYS = 38

_ARCH = platform.machine()
_NR = {
    "x86_64": {"seccomp": 317, "gettid": 186},
    "aarch64": {"seccomp": 277, "gettid": 178},
}


def require_supported_arch() -> None:
    if _ARCH != "x86_64":
        raise MonitorError(
            f"monitor tracing is implemented for x86_64 only (host is {_ARCH})"
        )


_REG_FIELDS = (
    "r15 r14 r13 r12 rbp rbx r11 r10 r9 r8 rax rcx rdx rsi rdi "
    "orig_rax rip cs eflags rsp ss fs_base gs_base ds es fs gs"
).split()


class UserRegs(ctypes.Structure):
    """x86_64 user_regs_struct."""

    _fields_ = [(name, ctypes.c_ulonglong) for name in _REG_FIELDS]

    def syscall_number(self) -> int:
        return self.orig_rax

    def syscall_args(self) -> tuple:
        return (self.rdi, self.rsi, self.rdx, self.r10, self.r8, self.r9)

    def retval(self) -> int:
        return ctypes.c_long(self.rax).value

    def set_retval(self, value: int) -> None:
        self.rax = ctypes.c_ulonglong(value & 0xFFFFFFFFFFFFFFFF).value

    def set_syscall_number(self, value: int) -> None:
        self.orig_rax = ctypes.c_ulonglong(value & 0xFFFFFFFFFFFFFFFF).value

    def set_syscall_arg(self, index: int, value: int) -> None:
        name = ("rdi", "rsi", "rdx", "r10", "r8", "r9")[index]
        setattr(self, name, ctypes.c_ulonglong(value & 0xFFFFFFFFFFFFFFFF).value)

    def copy(self) -> "UserRegs":
        dup = UserRegs()
        ctypes.memmove(ctypes.addressof(dup), ctypes.addressof(self), ctypes.sizeof(self))
        return dup


class PtraceError(MonitorError):
    def __init__(self, request: int, pid: int, errno: int):
        super().__init__(f"ptrace(0x{request:x}, {pid}) failed: {os.strerror(errno)}")
        self.errno = errno


def ptrace(request: int, pid: int, addr: int = 0, data: int = 0) -> int:
    ctypes.set_errno(0)
    res = libc.ptrace(request, pid, addr, data)
    if res == -1:
        err = ctypes.get_errno()
        if err != 0:
            raise PtraceError(request, pid, err)
    return res


def traceme() -> None:
    ptrace(PTRACE_TRACEME, 0, 0, 0)


def seize(pid: int, options: int) -> None:
    ptrace(PTRACE_SEIZE, pid, 0, options)


def set_options(pid: int, options: int) -> None:
    ptrace(PTRACE_SETOPTIONS, pid, 0, options)


def cont(pid: int, sig: int = 0) -> None:
    ptrace(PTRACE_CONT, pid, 0, sig)


def step_syscall(pid: int, sig: int = 0) -> None:
    ptrace(PTRACE_SYSCALL, pid, 0, sig)


def detach(pid: int, sig: int = 0) -> None:
    ptrace(PTRACE_DETACH, pid, 0, sig)


def get_regs(pid: int) -> UserRegs:
    regs = UserRegs()
    ptrace(PTRACE_GETREGS, pid, 0, ctypes.addressof(regs))
    return regs


def set_regs(pid: int, regs: UserRegs) -> None:
    ptrace(PTRACE_SETREGS, pid, 0, ctypes.addressof(regs))


def get_event_msg(pid: int) -> int:
    msg = ctypes.c_ulong()
    ptrace(PTRACE_GETEVENTMSG, pid, 0, ctypes.addressof(msg))
    return msg.value


def decode_wait_status(status: int) -> tuple:
    """Classify a waitpid status: ("exited", code), ("signaled", sig),
    or ("stopped", stop_signal, ptrace_event)."""
    if os.WIFEXITED(status):
        return ("exited", os.WEXITSTATUS(status), 0)
    if os.WIFSIGNALED(status):
        return ("signaled", os.WTERMSIG(status), 0)
    if os.WIFSTOPPED(status):
        return ("stopped", os.WSTOPSIG(status), status >> 16)
    return ("unknown", status, 0)


class _IOVec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


class TraceeMemoryError(MonitorError):
    """Tracee memory transfer failed or was partial."""


def read_tracee_mem(tid: int, addr: int, length: int) -> bytes:
    """Read exactly ``length`` bytes from a stopped task's address space."""
    if length == 0:
        return b""
    buf = ctypes.create_string_buffer(length)
    local = _IOVec(ctypes.cast(buf, ctypes.c_void_p), length)
    remote = _IOVec(addr, length)
    n = libc.process_vm_readv(tid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    if n == length:
        return buf.raw
    if n < 0:
        data = _proc_mem_read(tid, addr, length)
        if data is not None and len(data) == length:
            return data
        raise TraceeMemoryError(
            f"read of {length} bytes at 0x{addr:x} in task {tid} failed: "
            f"{os.strerror(ctypes.get_errno())}"
        )
    raise TraceeMemoryError(
        f"partial read at 0x{addr:x} in task {tid}: {n}/{length} bytes"
    )


def write_tracee_mem(tid: int, addr: int, data: bytes) -> None:
    """Write ``data`` into a stopped task's address space, all or nothing."""
    if not data:
        return
    buf = ctypes.create_string_buffer(bytes(data), len(data))
    local = _IOVec(ctypes.cast(buf, ctypes.c_void_p), len(data))
    remote = _IOVec(addr, len(data))
    n = libc.process_vm_writev(tid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    if n == len(data):
        return
    if n < 0 and _proc_mem_write(tid, addr, data):
        return
    raise TraceeMemoryError(
        f"write of {len(data)} bytes at 0x{addr:x} in task {tid} failed"
    )


def _proc_mem_read(tid: int, addr: int, length: int):
    try:
        with open(f"/proc/{tid}/mem", "rb", buffering=0) as f:
            f.seek(addr)
            return f.read(length)
    except OSError:
        return None


def _proc_mem_write(tid: int, addr: int, data: bytes) -> bool:
    try:
        with open(f"/proc/{tid}/mem", "wb", buffering=0) as f:
            f.seek(addr)
            return f.write(data) == len(data)
    except OSError:
        return False


def read_tracee_cstr(tid: int, addr: int, max_len: int = 4096) -> bytes:
    """Read a NUL-terminated string, chunked so a string that ends close to
    an unmapped page does not fault the whole read."""
    out = bytearray()
    while len(out) < max_len:
        # Stop chunks at page boundaries: the tail of the string may sit at
        # the end of the last mapped page.
        page_rem = 4096 - (addr % 4096)
        chunk_len = min(256, page_rem, max_len - len(out))
        chunk = read_tracee_mem(tid, addr, chunk_len)
        nul = chunk.find(b"\x00")
        if nul >= 0:
            out += chunk[:nul]
            return bytes(out)
        out += chunk
        addr += chunk_len
    raise TraceeMemoryError(f"unterminated string at 0x{addr:x} in task {tid}")


class _SockFprog(ctypes.Structure):
    _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]


def set_no_new_privs() -> None:
    if libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
        raise FilterError(
            f"PR_SET_NO_NEW_PRIVS failed: {os.strerror(ctypes.get_errno())}"
        )


def install_seccomp_filter(program: bytes, tsync: bool = False) -> None:
    """Install a classic-BPF seccomp filter on the calling task.

    Uses the seccomp(2) syscall, falling back to prctl(PR_SET_SECCOMP).
    Failure is a hard error: the monitor never silently falls back to
    tracing every syscall.
    """
    if len(program) % 8 or not program:
        raise FilterError("filter program must be a non-empty multiple of 8 bytes")
    buf = ctypes.create_string_buffer(program, len(program))
    prog = _SockFprog(len(program) // 8, ctypes.cast(buf, ctypes.c_void_p))
    nr = _NR.get(_ARCH, {}).get("seccomp")
    flags = SECCOMP_FILTER_FLAG_TSYNC if tsync else 0
    if nr is not None:
        ctypes.set_errno(0)
        if libc.syscall(nr, SECCOMP_SET_MODE_FILTER, flags, ctypes.byref(prog)) == 0:
            return
        err = ctypes.get_errno()
    else:
        err = 0
    PR_SET_SECCOMP, SECCOMP_MODE_FILTER = 22, 2
    ctypes.set_errno(0)
    if libc.prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, ctypes.byref(prog), 0, 0) == 0:
        return
    err = ctypes.get_errno() or err
    raise FilterError(f"kernel rejected seccomp filter: {os.strerror(err)}")


def set_ptracer(pid: int) -> None:
    """Allow ``pid`` to attach to us under Yama ptrace_scope=1.  EINVAL
    (Yama absent) is ignored."""
    ctypes.set_errno(0)
    if libc.prctl(PR_SET_PTRACER, pid, 0, 0, 0) != 0:
        err = ctypes.get_errno()
        if err not in (22,):  # EINVAL: no Yama LSM
            raise MonitorError(f"PR_SET_PTRACER failed: {os.strerror(err)}")


def gettid() -> int:
    nr = _NR.get(_ARCH, {}).get("gettid")
    if nr is None:
        return os.getpid()
    return libc.syscall(nr)


def raw_get_affinity(tid: int) -> CpuSet:
    """Kernel-truth affinity of any task, no virtualization involved."""
    buf = (ctypes.c_byte * 128)()
    ctypes.set_errno(0)
    n = libc.sched_getaffinity(tid, 128, ctypes.byref(buf))
    if n != 0:
        raise MonitorError(
            f"sched_getaffinity({tid}) failed: {os.strerror(ctypes.get_errno())}"
        )
    return decode_kernel_mask(bytes(buf))


def raw_set_affinity(tid: int, cpus: CpuSet) -> None:
    data = encode_kernel_mask(cpus, max(8, (cpus.bits.bit_length() + 63) // 64 * 8))
    buf = ctypes.create_string_buffer(data, len(data))
    ctypes.set_errno(0)
    if libc.sched_setaffinity(tid, len(data), buf) != 0:
        err = ctypes.get_errno()
        raise OSError(err, f"sched_setaffinity({tid}): {os.strerror(err)}")
