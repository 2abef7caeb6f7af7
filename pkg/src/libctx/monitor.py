"""The supervisor: spawns and traces supervised tasks, installs the syscall
filter, runs the trace event loop, tracks thread lifecycle, dispatches
interposition handlers, and enforces CPU affinity.

One Monitor instance owns one supervised process tree.  All ptrace
operations must run on the thread that spawned the children (the kernel
binds a tracee to its tracer thread); configuration APIs are safe from
other threads because they never touch ptrace.

Supervised children are placed in a dedicated process group so the event
loop's wait cannot steal exit statuses from unrelated children of the
embedding process.
"""

from __future__ import annotations

import errno
import os
import shutil
import signal
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import lowlevel as ll
from .bpf import build_trace_filter, target_syscalls
from .cpuset import CpuSet, decode_kernel_mask, encode_kernel_mask, format_cpu_list
from .errors import MonitorError, RegistryError, SpawnError
from .forge import ForgeStore
from .handlers import (
    PASS,
    REJECT,
    REWRITE,
    clamp_affinity_request,
    decode_affinity_args,
    default_rules,
    forge_affinity_reply,
    match_redirect,
    resolve_tracee_dirfd,
    scratch_address,
)
from .log import get_logger, trace as log_trace
from .registry import Context, Registry
from .topology import HostTopology, read_host_topology

logger = get_logger("libctx.monitor")

_TRACE_OPTIONS = (
    ll.O_TRACESYSGOOD
    | ll.O_TRACEFORK
    | ll.O_TRACEVFORK
    | ll.O_TRACECLONE
    | ll.O_TRACEEXEC
    | ll.O_TRACEEXIT
    | ll.O_TRACESECCOMP
    | ll.O_EXITKILL
)

_ENOSYS_RET = -ll.ENOSYS


class TaskGone(Exception):
    """A task exited while the monitor was stepping it."""

    def __init__(self, tid: int, status: int):
        super().__init__(f"task {tid} exited mid-step")
        self.tid = tid
        self.status = status


@dataclass
class Counters:
    """Monotone event counters backing the overhead and transparency tests."""

    stops_seen: int = 0
    syscalls_rewritten: int = 0
    files_redirected: int = 0
    entries: dict = field(default_factory=dict)
    exits: dict = field(default_factory=dict)

    def note_entry(self, sysno: int) -> None:
        self.entries[sysno] = self.entries.get(sysno, 0) + 1

    def note_exit(self, sysno: int) -> None:
        self.exits[sysno] = self.exits.get(sysno, 0) + 1


@dataclass
class TraceEvent:
    kind: str
    tid: int
    sysno: Optional[int] = None
    data: dict = field(default_factory=dict)


@dataclass
class SupervisedTask:
    pid: int
    ctx_id: int
    argv: list
    started_ns: Optional[int] = None
    finished_ns: Optional[int] = None
    exit_status: Optional[int] = None

    @property
    def exit_code(self) -> Optional[int]:
        """Exit code, or -signal when killed; None while running."""
        if self.exit_status is None:
            return None
        if os.WIFEXITED(self.exit_status):
            return os.WEXITSTATUS(self.exit_status)
        if os.WIFSIGNALED(self.exit_status):
            return -os.WTERMSIG(self.exit_status)
        return None

    @property
    def wall_seconds(self) -> Optional[float]:
        if self.started_ns is None or self.finished_ns is None:
            return None
        return (self.finished_ns - self.started_ns) / 1e9


@dataclass
class _TaskState:
    tid: int
    fresh: bool = False          # awaiting its birth SIGSTOP, to be suppressed
    in_syscall: bool = False     # trace-all mode entry/exit toggle
    pending: Optional[dict] = None


_seccomp_order_cache: Optional[bool] = None


def detect_legacy_seccomp_order() -> bool:
    """True when the kernel delivers a syscall-entry stop between the
    seccomp stop and the syscall-exit stop (pre-4.8 semantics).

    Calibrated once per process with a throwaway traced child.
    """
    global _seccomp_order_cache
    if _seccomp_order_cache is not None:
        return _seccomp_order_cache
    ll.require_supported_arch()
    prog = build_trace_filter()
    nr_getaffinity = target_syscalls()["sched_getaffinity"]
    pid = os.fork()
    if pid == 0:
        try:
            ll.traceme()
            ll.set_no_new_privs()
            ll.install_seccomp_filter(prog)
            os.kill(os.getpid(), signal.SIGSTOP)
            os.sched_getaffinity(0)
        finally:
            os._exit(0)
    legacy = False
    try:
        os.waitpid(pid, 0)  # SIGSTOP
        ll.set_options(pid, ll.O_TRACESYSGOOD | ll.O_TRACESECCOMP | ll.O_EXITKILL)
        ll.cont(pid)
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            _, status = os.waitpid(pid, 0)
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                raise MonitorError("seccomp calibration child exited early")
            sig = os.WSTOPSIG(status)
            event = status >> 16
            if sig == signal.SIGTRAP and event == ll.EVENT_SECCOMP:
                regs = ll.get_regs(pid)
                if regs.syscall_number() != nr_getaffinity:
                    ll.cont(pid)
                    continue
                ll.step_syscall(pid)
                os.waitpid(pid, 0)
                regs = ll.get_regs(pid)
                legacy = (
                    regs.retval() == _ENOSYS_RET
                    and regs.syscall_number() == nr_getaffinity
                )
                break
            ll.cont(pid)
    finally:
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        try:
            os.waitpid(pid, 0)
        except ChildProcessError:
            pass
    _seccomp_order_cache = legacy
    logger.debug("seccomp stop ordering: %s", "legacy" if legacy else "modern")
    return legacy


class Monitor:
    """Supervisor-mode monitor: traced children, one event loop."""

    def __init__(
        self,
        forge_root: Optional[str] = None,
        trace_all: bool = False,
        registry: Optional[Registry] = None,
        topology: Optional[HostTopology] = None,
    ):
        ll.require_supported_arch()
        self.topology = topology or read_host_topology()
        self.registry = registry or Registry(self.topology.online)
        self.forge = ForgeStore(self.topology, forge_root)
        self.registry.on_allowed_changed(self._allowed_changed)
        self.rules = default_rules(self._forged_path)
        self.counters = Counters()
        self.observer: Optional[Callable[[TraceEvent], None]] = None
        self.trace_all = trace_all
        self.mode = "supervisor"
        self.monitor_tid = ll.gettid()
        self._filter = build_trace_filter()
        self._sysno = target_syscalls()
        self._legacy = detect_legacy_seccomp_order() if not trace_all else False
        self._tasks: dict[int, _TaskState] = {}
        self._supervised: dict[int, SupervisedTask] = {}
        self._expected_children: dict[int, int] = {}
        self._limbo: set = set()
        self._pgid: Optional[int] = None
        self._app_pid: Optional[int] = None
        self._passthrough = False
        self._closed = False

    # --- configuration API -------------------------------------------------

    @property
    def online(self) -> CpuSet:
        return self.registry.online

    def create_context(self, allowed) -> int:
        if isinstance(allowed, str):
            from .cpuset import parse_cpu_list

            allowed = parse_cpu_list(allowed)
        ctx_id = self.registry.create_context(allowed)
        self.forge.refresh(ctx_id, allowed)
        return ctx_id

    def set_allowed_cpus(self, ctx_id: int, allowed) -> None:
        if isinstance(allowed, str):
            from .cpuset import parse_cpu_list

            allowed = parse_cpu_list(allowed)
        self.registry.set_allowed_cpus(ctx_id, allowed)

    def setenv(self, ctx_id: int, name: str, value: str) -> None:
        self.registry.setenv(ctx_id, name, value)

    def unsetenv(self, ctx_id: int, name: str) -> None:
        self.registry.unsetenv(ctx_id, name)

    def _allowed_changed(self, ctx: Context) -> None:
        self.forge.refresh(ctx.ctx_id, ctx.allowed)
        for tid in self.registry.bound_threads(ctx.ctx_id):
            self.enforce_affinity(tid, ctx)

    def _forged_path(self, ctx_id: int, canonical: str) -> str:
        path = self.forge.forged_path(ctx_id, canonical)
        if path is None or not os.path.exists(path):
            ctx = self.registry.get(ctx_id)
            self.forge.refresh(ctx_id, ctx.allowed)
            path = self.forge.forged_path(ctx_id, canonical)
        return path

    # --- spawning ------------------------------------------------------------

    def spawn_supervised(
        self,
        argv: list,
        ctx_id: int,
        stdin: Optional[int] = None,
        stdout: Optional[int] = None,
        stderr: Optional[int] = None,
        extra_env: Optional[dict] = None,
        start: bool = False,
    ) -> SupervisedTask:
        """Fork a traced child, install the filter in it, apply the context's
        environment and affinity, and leave it stopped (resume() to run)."""
        if self._closed:
            raise MonitorError("monitor is closed")
        ctx = self.registry.get(ctx_id)
        if not ctx.allowed:
            raise RegistryError("context has an empty cpu set")
        exe = self._resolve_exe(argv[0])
        env = self.registry.materialize_env(ctx_id, dict(os.environ))
        if extra_env:
            env.update(extra_env)
        self.forge.refresh(ctx_id, ctx.allowed)

        if not self._tasks:
            # The wait-domain group is only meaningful while members live.
            self._pgid = None
        pgid = self._pgid or 0
        err_r, err_w = os.pipe2(os.O_CLOEXEC)
        pid = os.fork()
        if pid == 0:
            try:
                os.close(err_r)
                try:
                    os.setpgid(0, pgid)
                except OSError:
                    pass
                for fd, target in ((stdin, 0), (stdout, 1), (stderr, 2)):
                    if fd is not None:
                        os.dup2(fd, target)
                ll.traceme()
                ll.set_no_new_privs()
                if not self.trace_all:
                    ll.install_seccomp_filter(self._filter)
                os.execve(exe, argv, env)
            except BaseException as exc:  # noqa: BLE001 - must not unwind into the fork
                try:
                    os.write(err_w, str(exc).encode()[:512])
                except OSError:
                    pass
            os._exit(127)

        os.close(err_w)
        try:
            _, status = os.waitpid(pid, ll.WALL)
            if not os.WIFSTOPPED(status):
                detail = os.read(err_r, 512).decode(errors="replace")
                raise self._spawn_error(exe, detail, status)
            detail = b""
            try:
                os.set_blocking(err_r, False)
                detail = os.read(err_r, 512) or b""
            except OSError:
                pass
            if detail:
                os.kill(pid, signal.SIGKILL)
                os.waitpid(pid, ll.WALL)
                raise self._spawn_error(exe, detail.decode(errors="replace"), None)
            ll.set_options(pid, _TRACE_OPTIONS)
        finally:
            os.close(err_r)

        if self._pgid is None:
            self._pgid = pid
        self.registry.bind_thread(pid, ctx_id)
        self.enforce_affinity(pid, ctx)
        self._tasks[pid] = _TaskState(tid=pid)
        task = SupervisedTask(pid=pid, ctx_id=ctx_id, argv=list(argv))
        self._supervised[pid] = task
        log_trace(logger, "spawned %s as pid %d under %s", argv[0], pid, ctx.describe())
        if start:
            self.resume(task)
        return task

    def _spawn_error(self, exe: str, detail: str, status) -> SpawnError:
        message = f"failed to start {exe!r}"
        if detail:
            message += f": {detail}"
            if "ptrace" in detail and ("not permitted" in detail or "denied" in detail):
                message += " (check kernel.yama.ptrace_scope)"
        elif status is not None:
            message += f" (child died with status {status:#x} before tracing began)"
        return SpawnError(message)

    @staticmethod
    def _resolve_exe(name: str) -> str:
        if os.sep in name:
            if not os.path.isfile(name) or not os.access(name, os.X_OK):
                raise SpawnError(f"program not found or not executable: {name!r}")
            return os.path.abspath(name)
        found = shutil.which(name)
        if found is None:
            raise SpawnError(f"program not found: {name!r}")
        return found

    def attach_to_process(self, app_pid: int) -> None:
        """In-process mode: seize every task of an already-running process.

        The application must have granted us attach rights (PR_SET_PTRACER)
        and installs its own syscall filter after we confirm readiness.
        Seized tasks keep running; only filter traps stop them.
        """
        self.mode = "inprocess"
        self._app_pid = app_pid
        tids = sorted(int(t) for t in os.listdir(f"/proc/{app_pid}/task"))
        if not tids:
            raise MonitorError(f"process {app_pid} has no tasks")
        for tid in tids:
            try:
                ll.seize(tid, _TRACE_OPTIONS)
            except ll.PtraceError as exc:
                raise MonitorError(
                    f"cannot seize task {tid} of process {app_pid}: {exc} "
                    "(check kernel.yama.ptrace_scope)"
                ) from exc
            self._tasks[tid] = _TaskState(tid=tid)
        log_trace(logger, "seized %d tasks of process %d", len(tids), app_pid)

    def passthrough(self) -> None:
        """Stop virtualizing: contexts and bindings are dropped, traps are
        resumed untouched.  The trace itself cannot be removed while the
        application's filter is installed."""
        self._passthrough = True
        self.forge.cleanup()

    def resume(self, task: SupervisedTask) -> None:
        """Start a freshly spawned (stopped) child and begin timing it."""
        task.started_ns = time.monotonic_ns()
        if self.trace_all:
            ll.step_syscall(task.pid)
        else:
            ll.cont(task.pid)

    def run_command(self, argv: list, ctx_id: int, **spawn_kw) -> int:
        """Spawn one child, run it to completion, return its exit code."""
        task = self.spawn_supervised(argv, ctx_id, **spawn_kw)
        self.resume(task)
        self.run()
        return task.exit_code

    # --- affinity enforcement -------------------------------------------------

    def enforce_affinity(self, tid: int, ctx: Context) -> None:
        """Pin a task to its context's allowance; on a dead task the binding
        is removed."""
        visible = ctx.allowed & self.online
        try:
            ll.raw_set_affinity(tid, visible)
        except OSError as exc:
            if exc.errno == errno.ESRCH:
                self.registry.unbind(tid)
            else:
                logger.warning("pin of task %d failed: %s", tid, exc)

    def read_task_affinity(self, tid: int) -> CpuSet:
        """Kernel-truth affinity of a task (never virtualized)."""
        return ll.raw_get_affinity(tid)

    # --- event loop -------------------------------------------------------------

    def run(self) -> dict:
        """Process trace stops until every supervised task has exited.

        Returns {pid: exit_code} for the supervised roots.
        """
        wait_domain = -1 if self.mode == "inprocess" else None
        while self._tasks or self._limbo:
            domain = wait_domain if wait_domain is not None else (
                -self._pgid if self._pgid else -1
            )
            try:
                tid, status = os.waitpid(domain, ll.WALL)
            except InterruptedError:
                continue
            except ChildProcessError:
                if self._tasks:
                    logger.warning("wait domain drained with %d tasks tracked", len(self._tasks))
                    self._tasks.clear()
                break
            self._dispatch(tid, status)
        return {pid: t.exit_code for pid, t in self._supervised.items()}

    def _emit(self, event: TraceEvent) -> None:
        if self.observer is not None:
            try:
                self.observer(event)
            except Exception:  # noqa: BLE001 - observers must not kill the loop
                logger.exception("trace observer failed")

    def _dispatch(self, tid: int, status: int) -> None:
        kind, a, event = ll.decode_wait_status(status)
        if kind in ("exited", "signaled"):
            self._task_gone(tid, status)
            return
        if kind != "stopped":
            logger.warning("unknown wait status %#x for task %d", status, tid)
            return
        self.counters.stops_seen += 1
        sig = a

        if sig == signal.SIGTRAP and event == ll.EVENT_SECCOMP:
            self._on_syscall_entry(tid, seccomp_stop=True)
        elif sig == ll.SYSCALL_TRAP:
            if self.trace_all:
                self._on_trace_all_trap(tid)
            else:
                # Stray trap outside a handler step: resume, fail-open.
                self._resume_task(tid)
        elif sig == signal.SIGTRAP and event in (ll.EVENT_CLONE, ll.EVENT_FORK, ll.EVENT_VFORK):
            child = ll.get_event_msg(tid)
            self._on_new_child(tid, child)
            self._resume_task(tid)
        elif sig == signal.SIGTRAP and event == ll.EVENT_EXEC:
            self._on_exec(tid)
            self._resume_task(tid)
        elif sig == signal.SIGTRAP and event == ll.EVENT_EXIT:
            state = self._tasks.get(tid)
            if state is not None:
                state.pending = None
            self._resume_task(tid)
        elif event == ll.EVENT_STOP:
            self._resume_task(tid)
        elif sig == signal.SIGSTOP and tid in self._expected_children:
            parent = self._expected_children.pop(tid)
            log_trace(logger, "birth stop of %d (cloned by %d)", tid, parent)
            self._resume_task(tid)  # suppress the birth SIGSTOP
        elif tid not in self._tasks:
            # The clone child's stop raced ahead of its parent's clone event:
            # hold it stopped until the event names it (pin-before-run).
            log_trace(logger, "holding unknown task %d in limbo", tid)
            self._limbo.add(tid)
        else:
            self._resume_task(tid, sig)

    def _resume_task(self, tid: int, sig: int = 0) -> None:
        try:
            if self.trace_all:
                ll.step_syscall(tid, sig)
            else:
                ll.cont(tid, sig)
        except ll.PtraceError as exc:
            if exc.errno == errno.ESRCH:
                return
            raise

    def _task_gone(self, tid: int, status: int) -> None:
        self._tasks.pop(tid, None)
        self._limbo.discard(tid)
        self._expected_children.pop(tid, None)
        self.registry.unbind(tid)
        task = self._supervised.get(tid)
        if task is not None and task.exit_status is None:
            task.exit_status = status
            task.finished_ns = time.monotonic_ns()
        self._emit(TraceEvent("task_exit", tid, data={"status": status}))

    def _on_new_child(self, parent: int, child: int) -> None:
        ctx_id = self.registry.inherit_binding(parent, child)
        self._tasks.setdefault(child, _TaskState(tid=child, fresh=True))
        if ctx_id is not None:
            self.enforce_affinity(child, self.registry.get(ctx_id))
        self._emit(TraceEvent("clone", parent, data={"child": child, "ctx": ctx_id}))
        if child in self._limbo:
            self._limbo.discard(child)
            self._resume_task(child)
        else:
            self._expected_children[child] = parent

    def _on_exec(self, tid: int) -> None:
        state = self._tasks.get(tid)
        if state is not None:
            state.pending = None
            state.in_syscall = False
        ctx = self.registry.lookup_context(tid)
        if ctx is not None:
            self.enforce_affinity(tid, ctx)
        self._emit(TraceEvent("exec", tid))

    # --- syscall interposition ---------------------------------------------------

    def _target_context(self, tid: int, pid_arg: int) -> Optional[Context]:
        """Context whose allowance governs this call: the caller's when
        pid==0, the target's when an explicit bound tid is named, and none
        (pass-through) for unbound targets."""
        target = tid if pid_arg == 0 else pid_arg
        ctx = self.registry.lookup_context(target)
        if ctx is None:
            return None
        return ctx

    def _on_syscall_entry(self, tid: int, seccomp_stop: bool) -> None:
        state = self._tasks.setdefault(tid, _TaskState(tid=tid))
        try:
            regs = ll.get_regs(tid)
        except ll.PtraceError:
            self._resume_task(tid)
            return
        sysno = regs.syscall_number()
        self.counters.note_entry(sysno)
        self._emit(TraceEvent("entry", tid, sysno))
        try:
            plan = self._classify(tid, regs, sysno)
        except ll.TraceeMemoryError as exc:
            logger.warning("classification of syscall %d in %d failed: %s", sysno, tid, exc)
            plan = None
        if plan is None:
            self._resume_task(tid)
            return
        if self.trace_all:
            # The exit trap arrives through the event loop.
            try:
                self._apply_entry(tid, regs, plan)
                state.pending = plan
            except (ll.TraceeMemoryError, ll.PtraceError) as exc:
                logger.warning("entry rewrite failed in %d: %s", tid, exc)
            ll.step_syscall(tid)
            return
        try:
            if self._legacy and seccomp_stop:
                regs = self._trap_step(tid)  # advance to the syscall-entry stop
            self._apply_entry(tid, regs, plan)
            exit_regs = self._trap_step(tid)
            self.counters.note_exit(sysno)
            self._apply_exit(tid, exit_regs, plan)
        except TaskGone as gone:
            self._task_gone(gone.tid, gone.status)
            return
        except (ll.TraceeMemoryError, ll.PtraceError) as exc:
            logger.warning("interposition of syscall %d in %d failed: %s", sysno, tid, exc)
        self._resume_task(tid)

    def _on_trace_all_trap(self, tid: int) -> None:
        state = self._tasks.setdefault(tid, _TaskState(tid=tid))
        if not state.in_syscall:
            state.in_syscall = True
            self._on_syscall_entry(tid, seccomp_stop=False)
            return
        state.in_syscall = False
        plan = state.pending
        state.pending = None
        if plan is not None:
            try:
                regs = ll.get_regs(tid)
                self.counters.note_exit(plan["sysno"])
                self._apply_exit(tid, regs, plan)
            except (ll.TraceeMemoryError, ll.PtraceError) as exc:
                logger.warning("exit rewrite failed in %d: %s", tid, exc)
        ll.step_syscall(tid)

    def _trap_step(self, tid: int) -> ll.UserRegs:
        """One PTRACE_SYSCALL step to the next syscall trap of this task,
        forwarding unrelated signal stops (bounded)."""
        sig = 0
        for _ in range(16):
            ll.step_syscall(tid, sig)
            _, status = os.waitpid(tid, ll.WALL)
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                raise TaskGone(tid, status)
            stopsig = os.WSTOPSIG(status)
            event = status >> 16
            if stopsig == ll.SYSCALL_TRAP:
                return ll.get_regs(tid)
            if stopsig == signal.SIGTRAP and event == ll.EVENT_EXIT:
                ll.cont(tid)
                _, status = os.waitpid(tid, ll.WALL)
                raise TaskGone(tid, status)
            sig = stopsig if event == 0 else 0
        raise ll.TraceeMemoryError(f"task {tid} would not reach a syscall trap")

    # classification produces a plan dict consumed by _apply_entry/_apply_exit
    def _classify(self, tid: int, regs: ll.UserRegs, sysno: int) -> Optional[dict]:
        if self._passthrough:
            return None
        nr = self._sysno
        if sysno == nr.get("sched_getaffinity"):
            return self._classify_getaffinity(tid, regs, sysno)
        if sysno == nr.get("sched_setaffinity"):
            return self._classify_setaffinity(tid, regs, sysno)
        if sysno in (nr.get("openat"), nr.get("open")):
            return self._classify_open(tid, regs, sysno)
        return None

    def _classify_getaffinity(self, tid, regs, sysno) -> Optional[dict]:
        pid_arg, length, bufp = decode_affinity_args(regs.syscall_args())
        ctx = self._target_context(tid, pid_arg)
        if ctx is None or self.registry.is_identity(ctx):
            return None
        return {"op": "getaffinity", "sysno": sysno, "ctx": ctx, "len": length, "buf": bufp}

    def _classify_setaffinity(self, tid, regs, sysno) -> Optional[dict]:
        pid_arg, length, bufp = decode_affinity_args(regs.syscall_args())
        ctx = self._target_context(tid, pid_arg)
        if ctx is None or self.registry.is_identity(ctx):
            return None
        nbytes = min(length, 128)
        data = ll.read_tracee_mem(tid, bufp, nbytes)
        requested = decode_kernel_mask(data)
        decision, effective = clamp_affinity_request(requested, ctx.allowed & self.online)
        if decision == PASS:
            return None
        plan = {
            "op": "setaffinity",
            "sysno": sysno,
            "ctx": ctx,
            "decision": decision,
            "requested": requested,
            "effective": effective,
            "buf": bufp,
            "saved": data,
            "target": tid if pid_arg == 0 else pid_arg,
        }
        return plan

    def _classify_open(self, tid, regs, sysno) -> Optional[dict]:
        args = regs.syscall_args()
        if sysno == self._sysno.get("openat"):
            path_arg_index = 1
            dirfd = args[0] & 0xFFFFFFFF
            if dirfd >= 0x80000000:
                dirfd -= 0x100000000
        else:
            path_arg_index = 0
            dirfd = None
        ctx = self.registry.lookup_context(tid)
        if ctx is None or self.registry.is_identity(ctx):
            return None
        path_ptr = args[path_arg_index]
        path = ll.read_tracee_cstr(tid, path_ptr)
        base = None
        if not path.startswith(b"/"):
            base = resolve_tracee_dirfd(tid, dirfd if dirfd is not None else -100)
        rule = match_redirect(path, self.rules, base)
        if rule is None:
            return None
        forged = rule.forged_path_provider(ctx.ctx_id)
        if forged is None:
            return None
        return {
            "op": "open",
            "sysno": sysno,
            "ctx": ctx,
            "canonical": rule.canonical_path,
            "forged": forged,
            "path_arg_index": path_arg_index,
            "orig_path_ptr": path_ptr,
        }

    def _apply_entry(self, tid: int, regs: ll.UserRegs, plan: dict) -> None:
        op = plan["op"]
        if op == "getaffinity":
            return
        if op == "setaffinity":
            if plan["decision"] == REWRITE:
                clamped = encode_kernel_mask(plan["effective"], len(plan["saved"]))
                ll.write_tracee_mem(tid, plan["buf"], clamped)
            else:  # REJECT: suppress the syscall, EINVAL comes at exit
                mod = regs.copy()
                mod.set_syscall_number(-1)
                ll.set_regs(tid, mod)
            self.counters.syscalls_rewritten += 1
            return
        if op == "open":
            forged_bytes = plan["forged"].encode() + b"\x00"
            scratch = scratch_address(regs.rsp)
            plan["scratch"] = scratch
            plan["scratch_saved"] = ll.read_tracee_mem(tid, scratch, len(forged_bytes))
            ll.write_tracee_mem(tid, scratch, forged_bytes)
            mod = regs.copy()
            mod.set_syscall_arg(plan["path_arg_index"], scratch)
            ll.set_regs(tid, mod)

    def _apply_exit(self, tid: int, regs: ll.UserRegs, plan: dict) -> None:
        op = plan["op"]
        ret = regs.retval()
        if op == "getaffinity":
            if ret > 0:
                reply = forge_affinity_reply(plan["ctx"], self.online, plan["len"], ret)
                ll.write_tracee_mem(tid, plan["buf"], reply)
                self.counters.syscalls_rewritten += 1
                self._emit(
                    TraceEvent(
                        "rewrite_getaffinity",
                        tid,
                        plan["sysno"],
                        {"retval": ret, "bytes": len(reply)},
                    )
                )
            return
        if op == "setaffinity":
            if plan["decision"] == REWRITE:
                ll.write_tracee_mem(tid, plan["buf"], plan["saved"])
            else:
                mod = regs.copy()
                mod.set_retval(-errno.EINVAL)
                ll.set_regs(tid, mod)
                ret = -errno.EINVAL
            kernel_now = None
            try:
                kernel_now = ll.raw_get_affinity(plan["target"])
            except MonitorError:
                pass
            self._emit(
                TraceEvent(
                    "setaffinity",
                    tid,
                    plan["sysno"],
                    {
                        "requested": plan["requested"],
                        "decision": plan["decision"],
                        "effective": plan["effective"],
                        "retval": ret,
                        "kernel": kernel_now,
                    },
                )
            )
            return
        if op == "open":
            ll.write_tracee_mem(tid, plan["scratch"], plan["scratch_saved"])
            mod = regs.copy()
            mod.set_syscall_arg(plan["path_arg_index"], plan["orig_path_ptr"])
            ll.set_regs(tid, mod)
            self.counters.files_redirected += 1
            self._emit(
                TraceEvent(
                    "redirect",
                    tid,
                    plan["sysno"],
                    {"canonical": plan["canonical"], "forged": plan["forged"], "retval": ret},
                )
            )

    # --- teardown ---------------------------------------------------------------

    def close(self) -> None:
        """Kill any remaining supervised tasks and remove forged files."""
        if self._closed:
            return
        self._closed = True
        if self._pgid:
            try:
                os.killpg(self._pgid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        deadline = time.monotonic() + 5.0
        while self._tasks and time.monotonic() < deadline:
            try:
                tid, status = os.waitpid(-self._pgid if self._pgid else -1, ll.WALL | os.WNOHANG)
            except ChildProcessError:
                break
            if tid == 0:
                time.sleep(0.01)
                continue
            self._task_gone(tid, status)
        self.forge.cleanup()

    def __enter__(self) -> "Monitor":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
