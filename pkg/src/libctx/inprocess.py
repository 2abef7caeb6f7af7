"""In-process runtime: the client API mirroring the context surface
(create, set_allowed_cpus, setenv, unsetenv, enter, exit) plus namespace
library loading and jump-table dispatch.

``Runtime.initialize()`` forks a monitor child that seizes this process;
this process then installs the syscall filter on itself, so resource
queries made by any bound thread are virtualized from that point on.
Initialization happens once per process, before any context is created.

Environment overrides cannot be virtualized per-thread (environment reads
are not syscalls), so they are applied to the process environment only
for the duration of a library load, serialized by a global lock.
"""

from __future__ import annotations

import contextlib
import os
import subprocess
import sys
import threading
from typing import Optional

from . import control, lowlevel as ll
from .bpf import build_trace_filter
from .cpuset import CpuSet, format_cpu_list, parse_cpu_list
from .errors import LibctxError, MonitorError
from .log import get_logger
from .nsload import NamespaceLoader
from .registry import EnterStack

logger = get_logger("libctx.inprocess")

_runtime_lock = threading.Lock()
_runtime: Optional["Runtime"] = None


class Runtime:
    """Handle to the in-process monitor plus the app-side loader state."""

    def __init__(self, monitor_proc, client: control.ControlClient, forge_root=None):
        self._proc = monitor_proc
        self._client = client
        self._stack = EnterStack()
        self._affinity_local = threading.local()
        self._env_overrides: dict[int, dict] = {}
        self._env_lock = threading.Lock()
        self.loader = NamespaceLoader(thread_ctx=self._stack.top)
        self.monitor_pid = monitor_proc.pid

    # --- lifecycle -----------------------------------------------------------

    @classmethod
    def initialize(cls, forge_root: Optional[str] = None) -> "Runtime":
        """Fork the monitor, let it seize us, install our filter, handshake."""
        global _runtime
        with _runtime_lock:
            if _runtime is not None:
                raise MonitorError("the in-process runtime is already initialized")
            ctrl_req_r, ctrl_req_w = os.pipe()
            ctrl_rep_r, ctrl_rep_w = os.pipe()
            ready_r, ready_w = os.pipe()
            for fd in (ctrl_req_r, ctrl_rep_w, ready_w):
                os.set_inheritable(fd, True)
            argv = [
                sys.executable,
                "-m",
                "libctx.monitor_main",
                "--app-pid",
                str(os.getpid()),
                "--ctrl-read",
                str(ctrl_req_r),
                "--ctrl-write",
                str(ctrl_rep_w),
                "--ready-write",
                str(ready_w),
            ]
            if forge_root:
                argv += ["--forge-root", forge_root]
            proc = subprocess.Popen(argv, close_fds=False)
            for fd in (ctrl_req_r, ctrl_rep_w, ready_w):
                os.close(fd)
            try:
                ll.set_ptracer(proc.pid)
                status = os.read(ready_r, 512)
                if not status.startswith(control.READY_BYTE):
                    raise MonitorError(
                        f"monitor failed to attach: {status[1:].decode(errors='replace') or 'no detail'}"
                    )
                ll.set_no_new_privs()
                ll.install_seccomp_filter(build_trace_filter(), tsync=True)
            except BaseException:
                proc.kill()
                proc.wait()
                os.close(ctrl_req_w)
                os.close(ctrl_rep_r)
                os.close(ready_r)
                raise
            os.close(ready_r)
            runtime = cls(proc, control.ControlClient(ctrl_req_w, ctrl_rep_r), forge_root)
            _runtime = runtime
            logger.debug("in-process monitor attached as pid %d", proc.pid)
            return runtime

    def shutdown(self) -> None:
        """Drop all contexts and bindings; the monitor stays attached in
        pass-through mode (the installed filter cannot be removed) until
        this process exits."""
        with contextlib.suppress(LibctxError, OSError):
            self._client.call(control.Request(control.SHUTDOWN))

    # --- context configuration --------------------------------------------------

    def create_context(self, cpus) -> int:
        text = cpus if isinstance(cpus, str) else format_cpu_list(cpus)
        parse_cpu_list(text)
        reply = self._client.call_ok(control.Request(control.CREATE_CTX, text=text))
        self._env_overrides[reply.code] = {}
        return reply.code

    def set_allowed_cpus(self, ctx_id: int, cpus) -> None:
        text = cpus if isinstance(cpus, str) else format_cpu_list(cpus)
        parse_cpu_list(text)
        self._client.call_ok(control.Request(control.SET_CPUS, ctx_id=ctx_id, text=text))

    def setenv(self, ctx_id: int, name: str, value: str) -> None:
        self._client.call_ok(
            control.Request(control.SETENV, ctx_id=ctx_id, text=name, text2=value)
        )
        self._env_overrides.setdefault(ctx_id, {})[name] = str(value)

    def unsetenv(self, ctx_id: int, name: str) -> None:
        self._client.call_ok(control.Request(control.UNSETENV, ctx_id=ctx_id, text=name))
        self._env_overrides.setdefault(ctx_id, {})[name] = None

    # --- enter / exit ---------------------------------------------------------------

    def _saved_affinity_stack(self) -> list:
        stack = getattr(self._affinity_local, "saved", None)
        if stack is None:
            stack = []
            self._affinity_local.saved = stack
        return stack

    def enter(self, ctx_id: int, affinity: bool = False) -> None:
        """Bind the calling thread to a context; nested enters stack.  With
        ``affinity`` the thread is pinned to the context's cpus and the
        previous mask is restored on exit (clamped by any enclosing
        context)."""
        tid = ll.gettid()
        flags = control.BIND_WITH_AFFINITY if affinity else 0
        saved = os.sched_getaffinity(0) if affinity else None
        self._stack.push(ctx_id)
        try:
            self._client.call_ok(
                control.Request(control.BIND, ctx_id=ctx_id, tid=tid, flags=flags)
            )
        except BaseException:
            self._stack.pop()
            raise
        self._saved_affinity_stack().append(saved)
        self.loader._activate_shims(ctx_id)

    def exit(self) -> None:
        """Leave the innermost context, reverting to the enclosing one."""
        tid = ll.gettid()
        left = self._stack.pop()
        outer = self._stack.top()
        try:
            if outer is None:
                self._client.call_ok(control.Request(control.UNBIND, tid=tid))
            else:
                self._client.call_ok(
                    control.Request(control.BIND, ctx_id=outer, tid=tid)
                )
        except BaseException:
            self._stack.push(left)
            raise
        saved_stack = self._saved_affinity_stack()
        saved = saved_stack.pop() if saved_stack else None
        if saved is not None:
            with contextlib.suppress(OSError):
                os.sched_setaffinity(0, saved)
        self.loader._activate_shims(outer)

    @contextlib.contextmanager
    def context(self, ctx_id: int, affinity: bool = False):
        self.enter(ctx_id, affinity=affinity)
        try:
            yield ctx_id
        finally:
            self.exit()

    def current_context(self) -> Optional[int]:
        return self._stack.top()

    # --- library loading ---------------------------------------------------------------

    def load_library(self, ctx_id: int, path: str, symbols: list):
        """Load a library into the context's namespace with the context's
        environment overrides applied for the duration of the load."""
        overrides = self._env_overrides.get(ctx_id, {})
        with self._env_lock:
            saved = {}
            try:
                for name, value in overrides.items():
                    saved[name] = os.environ.get(name)
                    if value is None:
                        os.environ.pop(name, None)
                    else:
                        os.environ[name] = value
                return self.loader.load_into_namespace(ctx_id, path, symbols)
            finally:
                for name, old in saved.items():
                    if old is None:
                        os.environ.pop(name, None)
                    else:
                        os.environ[name] = old

    def load_service(self, path: str, symbols: list) -> None:
        self.loader.load_service(path, symbols)

    def dispatch(self, symbol: str) -> int:
        return self.loader.dispatch(symbol)


def current_runtime() -> Optional[Runtime]:
    return _runtime
