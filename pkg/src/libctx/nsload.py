"""Load shared libraries into per-context linker namespaces, resolve their
symbols into per-context jump tables, and provide a service context for
namespace-incompatible dependencies.

The dynamic loader is not reentrant-safe across namespaces, so loads are
serialized process-wide; dispatch is a couple of dict/array reads and is
wait-free once a load completes.

The namespace budget is 16 including the base namespace (the dynamic
linker's ``glibc.rtld.nns`` tunable tops out at 16), so at most 15
context namespaces can exist; the base namespace hosts the service
context.
"""

from __future__ import annotations

import ctypes
import mmap
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import DispatchError, LibctxError, LoaderError, NamespaceCapError
from .log import get_logger
from .registry import EnterStack

logger = get_logger("libctx.nsload")

#: Total linker namespaces including the base one.
NAMESPACE_CAP = 16

LM_ID_BASE = 0
LM_ID_NEWLM = -1
RTLD_NOW = 0x0002
RTLD_GLOBAL = 0x0100
RTLD_DI_LMID = 1

#: Jump-table slots per context; ordinals are assigned process-wide.
TABLE_SLOTS = 1024

#: Size of the service address page shared with generated shims.
SERVICE_PAGE_BYTES = 4096


class GlibcDl:
    """ctypes bindings for the glibc namespace loader entry points."""

    def __init__(self):
        lib = ctypes.CDLL(None, use_errno=True)
        try:
            self._dlmopen = lib.dlmopen
        except AttributeError:  # pre-2.34 glibc keeps dl* in libdl
            lib = ctypes.CDLL("libdl.so.2", use_errno=True)
            self._dlmopen = lib.dlmopen
        self._dlmopen.restype = ctypes.c_void_p
        self._dlmopen.argtypes = [ctypes.c_long, ctypes.c_char_p, ctypes.c_int]
        self._dlopen = lib.dlopen
        self._dlopen.restype = ctypes.c_void_p
        self._dlopen.argtypes = [ctypes.c_char_p, ctypes.c_int]
        self._dlsym = lib.dlsym
        self._dlsym.restype = ctypes.c_void_p
        self._dlsym.argtypes = [ctypes.c_void_p, ctypes.c_char_p]
        self._dlerror = lib.dlerror
        self._dlerror.restype = ctypes.c_char_p
        self._dlinfo = lib.dlinfo
        self._dlinfo.restype = ctypes.c_int
        self._dlinfo.argtypes = [ctypes.c_void_p, ctypes.c_int, ctypes.c_void_p]

    def last_error(self) -> str:
        err = self._dlerror()
        return err.decode(errors="replace") if err else "unknown dynamic loader error"

    def open_new_namespace(self, path: str) -> tuple:
        self._dlerror()
        handle = self._dlmopen(LM_ID_NEWLM, path.encode(), RTLD_NOW)
        if not handle:
            raise LoaderError(self.last_error())
        lmid = ctypes.c_long()
        if self._dlinfo(handle, RTLD_DI_LMID, ctypes.byref(lmid)) != 0:
            raise LoaderError(self.last_error())
        return handle, lmid.value

    def open_in_namespace(self, lmid: int, path: str) -> int:
        self._dlerror()
        handle = self._dlmopen(lmid, path.encode(), RTLD_NOW)
        if not handle:
            raise LoaderError(self.last_error())
        return handle

    def open_base(self, path: str) -> int:
        self._dlerror()
        handle = self._dlopen(path.encode(), RTLD_NOW)
        if not handle:
            raise LoaderError(self.last_error())
        return handle

    def resolve(self, handle: int, symbol: str) -> Optional[int]:
        self._dlerror()
        addr = self._dlsym(handle, symbol.encode())
        return addr


@dataclass
class LibraryHandle:
    """One library instance inside one context's namespace."""

    ctx_id: int
    namespace_id: int
    path: str
    resolved: dict = field(default_factory=dict)
    dl_handle: int = 0


@dataclass
class ServiceContext:
    """Base-namespace handles plus the exported address page."""

    handles: dict = field(default_factory=dict)
    symbols: list = field(default_factory=list)
    page: Optional[mmap.mmap] = None
    page_addr: int = 0

    def publish(self, addresses: list) -> None:
        """Append resolved addresses to the page, 8 bytes each, little-endian."""
        if self.page is None:
            self.page = mmap.mmap(-1, SERVICE_PAGE_BYTES)
            buf = (ctypes.c_char * SERVICE_PAGE_BYTES).from_buffer(self.page)
            self.page_addr = ctypes.addressof(buf)
            self._buf = buf  # keep the view alive
        offset = len(self.symbols) * 8
        if offset + len(addresses) * 8 > SERVICE_PAGE_BYTES:
            raise LoaderError("service address page is full")
        for i, addr in enumerate(addresses):
            self.page[offset + i * 8: offset + (i + 1) * 8] = struct.pack("<Q", addr)

    def page_bytes(self) -> bytes:
        if self.page is None:
            return b""
        return self.page[: len(self.symbols) * 8]


class JumpTable:
    """Per-context flat code-address arrays indexed by symbol ordinal.

    A slot, once written for (ctx, symbol), is never rewritten; reloading
    the same library yields the same addresses so reuse is a no-op.
    """

    def __init__(self):
        self._ordinals: dict[str, int] = {}
        self._tables: dict[int, ctypes.Array] = {}

    def ordinal(self, symbol: str) -> int:
        ordinal = self._ordinals.get(symbol)
        if ordinal is None:
            ordinal = len(self._ordinals)
            if ordinal >= TABLE_SLOTS:
                raise LoaderError(f"jump table is full ({TABLE_SLOTS} symbols)")
            self._ordinals[symbol] = ordinal
        return ordinal

    def known_ordinal(self, symbol: str) -> Optional[int]:
        return self._ordinals.get(symbol)

    def table_for(self, ctx_id: int) -> ctypes.Array:
        table = self._tables.get(ctx_id)
        if table is None:
            table = (ctypes.c_void_p * TABLE_SLOTS)()
            self._tables[ctx_id] = table
        return table

    def table_address(self, ctx_id: int) -> int:
        return ctypes.addressof(self.table_for(ctx_id))

    def install(self, ctx_id: int, symbol: str, address: int) -> None:
        table = self.table_for(ctx_id)
        ordinal = self.ordinal(symbol)
        current = table[ordinal]
        if current not in (None, 0) and current != address:
            raise LoaderError(
                f"jump-table slot for ({ctx_id}, {symbol}) is already bound"
            )
        table[ordinal] = address

    def slot(self, ctx_id: int, symbol: str) -> Optional[int]:
        ordinal = self._ordinals.get(symbol)
        if ordinal is None:
            return None
        table = self._tables.get(ctx_id)
        if table is None:
            return None
        return table[ordinal] or None


class NamespaceLoader:
    """Owns namespaces, handles, the jump table, and the service context."""

    def __init__(
        self,
        dl: Optional[GlibcDl] = None,
        thread_ctx: Optional[Callable[[], Optional[int]]] = None,
        namespace_cap: int = NAMESPACE_CAP,
    ):
        self._dl = dl or GlibcDl()
        self._cap = namespace_cap
        self._lock = threading.RLock()
        self._namespaces: dict[int, int] = {}  # ctx_id -> lmid
        self._handles: dict[tuple, LibraryHandle] = {}
        self.jump_table = JumpTable()
        self.service = ServiceContext()
        self._stack = EnterStack()
        self._thread_ctx = thread_ctx or self._stack.top
        self._shims: list = []

    # --- namespace accounting -------------------------------------------------

    def namespace_count(self) -> int:
        """Cumulative namespaces: the base one plus every context namespace."""
        return 1 + len(self._namespaces)

    def namespaces_left(self) -> int:
        return self._cap - self.namespace_count()

    # --- loading ----------------------------------------------------------------

    def load_into_namespace(self, ctx_id: int, path: str, symbols: list) -> LibraryHandle:
        """Load a library (and its dependency closure, eagerly bound) into the
        context's namespace, creating the namespace on first use, and install
        the listed symbols into the jump table."""
        if not os.path.isfile(path):
            raise LoaderError(f"no such library: {path!r}")
        with self._lock:
            key = (ctx_id, os.path.abspath(path))
            cached = self._handles.get(key)
            if cached is not None:
                self._install_symbols(cached, symbols)
                return cached
            lmid = self._namespaces.get(ctx_id)
            if lmid is None:
                if self.namespace_count() + 1 > self._cap:
                    raise NamespaceCapError(
                        f"namespace cap reached: {self._cap} linker namespaces "
                        f"including the base namespace"
                    )
                dl_handle, lmid = self._dl.open_new_namespace(key[1])
                self._namespaces[ctx_id] = lmid
            else:
                dl_handle = self._dl.open_in_namespace(lmid, key[1])
            handle = LibraryHandle(
                ctx_id=ctx_id, namespace_id=lmid, path=key[1], dl_handle=dl_handle
            )
            self._install_symbols(handle, symbols)
            self._handles[key] = handle
            logger.debug(
                "loaded %s into ctx %d (namespace %d)", path, ctx_id, lmid
            )
            return handle

    def _install_symbols(self, handle: LibraryHandle, symbols: list) -> None:
        missing = []
        for symbol in symbols:
            if symbol in handle.resolved:
                continue
            addr = self._dl.resolve(handle.dl_handle, symbol)
            if not addr:
                missing.append(symbol)
                continue
            handle.resolved[symbol] = addr
            self.jump_table.install(handle.ctx_id, symbol, addr)
        if missing:
            raise LoaderError(
                f"unresolved symbols in {handle.path}: {', '.join(missing)}"
            )

    def load_service(self, path: str, symbols: list) -> None:
        """Resolve symbols from the base namespace and publish their addresses
        on the service page in declaration order.  Loading the same path again
        is a no-op; publication happens once."""
        with self._lock:
            key = os.path.abspath(path)
            if key in self.service.handles:
                return
            handle = self._dl.open_base(key)
            addresses = []
            missing = []
            for symbol in symbols:
                addr = self._dl.resolve(handle, symbol)
                if not addr:
                    missing.append(symbol)
                else:
                    addresses.append(addr)
            if missing:
                raise LoaderError(
                    f"unresolved service symbols in {path}: {', '.join(missing)}"
                )
            self.service.publish(addresses)
            self.service.handles[key] = handle
            self.service.symbols.extend(symbols)

    # --- dispatch ------------------------------------------------------------------

    def enter_thread(self, ctx_id: int) -> None:
        """Bind the calling thread to a context for dispatch purposes."""
        self._stack.push(ctx_id)
        self._activate_shims(ctx_id)

    def exit_thread(self) -> None:
        self._stack.pop()
        self._activate_shims(self._stack.top())

    def dispatch(self, symbol: str) -> int:
        """Code address of ``symbol`` in the calling thread's context."""
        ctx_id = self._thread_ctx()
        if ctx_id is None:
            raise DispatchError(
                f"calling thread is not bound to a context (symbol {symbol!r})",
                DispatchError.UNBOUND_THREAD,
            )
        addr = self.jump_table.slot(ctx_id, symbol)
        if addr is None:
            raise DispatchError(
                f"no jump-table slot for symbol {symbol!r} in context {ctx_id}",
                DispatchError.MISSING_SLOT,
            )
        return addr

    # --- generated-shim integration ---------------------------------------------

    def register_shim(self, shim_cdll) -> None:
        """Attach a compiled forwarding shim: its per-thread table pointer is
        kept in sync with the dispatch context, and its service page pointer
        is set once."""
        with self._lock:
            if hasattr(shim_cdll, "__shim_set_page") and self.service.page_addr:
                shim_cdll["__shim_set_page"](ctypes.c_void_p(self.service.page_addr))
            self._shims.append(shim_cdll)
        current = self._thread_ctx()
        if current is not None:
            self._activate_shims(current)

    def _activate_shims(self, ctx_id: Optional[int]) -> None:
        for shim in self._shims:
            try:
                setter = shim["__shim_set_table"]
            except (AttributeError, KeyError):
                continue
            if ctx_id is None:
                setter(ctypes.c_void_p(0))
            else:
                setter(ctypes.c_void_p(self.jump_table.table_address(ctx_id)))

    def callable_for(self, symbol: str, restype, *argtypes):
        """Convenience: a ctypes callable dispatching through the jump table
        at call time."""
        def call(*args):
            addr = self.dispatch(symbol)
            fn = ctypes.CFUNCTYPE(restype, *argtypes)(addr)
            return fn(*args)

        return call
