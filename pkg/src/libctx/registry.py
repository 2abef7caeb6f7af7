"""Context registry: per-context CPU allowances and environment overrides,
plus the thread-id -> context mapping consulted on every interposed
syscall.

The registry is shared between client API threads and the monitor event
loop.  Mutations take a lock; hot-path lookups read plain dicts, which is
safe under concurrent mutation here (single-item dict reads) and never
blocks the event loop on configuration changes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .cpuset import CpuSet, format_cpu_list
from .errors import RegistryError

#: Maximum depth of the per-thread enter/exit stack kept by client APIs.
MAX_ENTER_DEPTH = 8


@dataclass
class Context:
    """A named resource domain: allowed CPUs plus environment overrides.

    ``env_overrides`` maps a variable name to a string (set) or None
    (unset), in insertion order.  ``affinity_cache`` holds the encoded
    affinity reply served to interposed queries; it always decodes to
    exactly ``allowed`` and is invalidated whenever ``allowed`` changes.
    """

    ctx_id: int
    allowed: CpuSet
    env_overrides: dict = field(default_factory=dict)
    namespace_id: Optional[int] = None
    affinity_cache: Optional[bytes] = None
    generation: int = 0

    def describe(self) -> str:
        return f"ctx{self.ctx_id}[{format_cpu_list(self.allowed)}]"


class Registry:
    """Owns contexts and thread bindings for one monitor lifetime."""

    def __init__(self, online: CpuSet):
        if not online:
            raise RegistryError("online cpu set is empty")
        self._online = online
        self._lock = threading.RLock()
        self._contexts: dict[int, Context] = {}
        self._bindings: dict[int, int] = {}
        self._next_id = 1
        self._on_allowed_changed: list[Callable[[Context], None]] = []

    @property
    def online(self) -> CpuSet:
        return self._online

    def on_allowed_changed(self, callback: Callable[[Context], None]) -> None:
        """Register a hook run after a context's allowed set changes
        (forged-file refresh, thread re-pinning)."""
        self._on_allowed_changed.append(callback)

    def create_context(self, allowed: CpuSet) -> int:
        if not allowed:
            raise RegistryError("a context needs a non-empty cpu set")
        if not allowed.issubset(self._online):
            raise RegistryError(
                f"cpus {format_cpu_list(allowed - self._online)} are not online"
            )
        with self._lock:
            ctx_id = self._next_id
            self._next_id += 1  # ids are never reused within a monitor lifetime
            self._contexts[ctx_id] = Context(ctx_id=ctx_id, allowed=allowed)
        return ctx_id

    def get(self, ctx_id: int) -> Context:
        ctx = self._contexts.get(ctx_id)
        if ctx is None:
            raise RegistryError(f"unknown context {ctx_id}")
        return ctx

    def contexts(self) -> list:
        with self._lock:
            return list(self._contexts.values())

    def set_allowed_cpus(self, ctx_id: int, allowed: CpuSet) -> None:
        if not allowed:
            raise RegistryError("a context needs a non-empty cpu set")
        if not allowed.issubset(self._online):
            raise RegistryError(
                f"cpus {format_cpu_list(allowed - self._online)} are not online"
            )
        with self._lock:
            ctx = self.get(ctx_id)
            ctx.allowed = allowed
            ctx.affinity_cache = None
            ctx.generation += 1
            callbacks = list(self._on_allowed_changed)
        for cb in callbacks:
            cb(ctx)

    def setenv(self, ctx_id: int, name: str, value: str) -> None:
        _check_env_name(name)
        with self._lock:
            self.get(ctx_id).env_overrides[name] = str(value)

    def unsetenv(self, ctx_id: int, name: str) -> None:
        _check_env_name(name)
        with self._lock:
            self.get(ctx_id).env_overrides[name] = None

    def materialize_env(self, ctx_id: int, base_env: dict) -> dict:
        """Apply a context's overrides to a copy of ``base_env``."""
        env = dict(base_env)
        for name, value in self.get(ctx_id).env_overrides.items():
            if value is None:
                env.pop(name, None)
            else:
                env[name] = value
        return env

    # --- thread bindings -------------------------------------------------

    def bind_thread(self, tid: int, ctx_id: int) -> None:
        with self._lock:
            self.get(ctx_id)
            current = self._bindings.get(tid)
            if current is not None and current != ctx_id:
                raise RegistryError(
                    f"thread {tid} is already bound to context {current}"
                )
            self._bindings[tid] = ctx_id

    def rebind_thread(self, tid: int, ctx_id: int) -> None:
        """Replace a binding without the double-bind check (enter/exit)."""
        with self._lock:
            self.get(ctx_id)
            self._bindings[tid] = ctx_id

    def lookup(self, tid: int) -> Optional[int]:
        return self._bindings.get(tid)

    def lookup_context(self, tid: int) -> Optional[Context]:
        ctx_id = self._bindings.get(tid)
        if ctx_id is None:
            return None
        return self._contexts.get(ctx_id)

    def unbind(self, tid: int) -> None:
        with self._lock:
            self._bindings.pop(tid, None)

    def inherit_binding(self, parent_tid: int, child_tid: int) -> Optional[int]:
        """New threads get their creator's context at creation time."""
        with self._lock:
            ctx_id = self._bindings.get(parent_tid)
            if ctx_id is not None:
                self._bindings[child_tid] = ctx_id
            return ctx_id

    def bound_threads(self, ctx_id: int) -> list:
        with self._lock:
            return [tid for tid, cid in self._bindings.items() if cid == ctx_id]

    def is_identity(self, ctx: Context) -> bool:
        """Identity contexts (allowed == online) make virtualization a no-op."""
        return ctx.allowed == self._online


def _check_env_name(name: str) -> None:
    if not name or "=" in name:
        raise RegistryError(f"invalid environment variable name {name!r}")


class EnterStack:
    """Per-thread enter/exit nesting used by client APIs; depth <= 8."""

    def __init__(self):
        self._local = threading.local()

    def _stack(self) -> list:
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = []
            self._local.stack = stack
        return stack

    def push(self, ctx_id: int) -> None:
        stack = self._stack()
        if len(stack) >= MAX_ENTER_DEPTH:
            raise RegistryError(f"context enter depth exceeds {MAX_ENTER_DEPTH}")
        stack.append(ctx_id)

    def pop(self) -> int:
        stack = self._stack()
        if not stack:
            raise RegistryError("context exit without a matching enter")
        return stack.pop()

    def top(self) -> Optional[int]:
        stack = self._stack()
        return stack[-1] if stack else None
