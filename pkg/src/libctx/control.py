"""Control channel between the client API and the monitor process.

Wire format (little-endian throughout): every message is a u32 body
length followed by the body, whose first byte is the protocol version.

    request body:  u8 version | u8 opcode | payload
    reply body:    u8 version | u8 status (0 ok, 1 err) | i32 code | str message

Strings are u16 length + UTF-8 bytes.  CREATE_CTX replies carry the new
context id in ``code``.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from typing import Optional

from .cpuset import format_cpu_list, parse_cpu_list
from .errors import ControlProtocolError, LibctxError

VERSION = 1

#: Readiness handshake bytes sent by the monitor before serving requests.
READY_BYTE = b"R"
FAILED_BYTE = b"F"

CREATE_CTX = 1
SET_CPUS = 2
SETENV = 3
UNSETENV = 4
BIND = 5
UNBIND = 6
SHUTDOWN = 7

#: BIND flag: also pin the thread to the context's cpus.
BIND_WITH_AFFINITY = 0x01

OK = 0
ERR = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    if len(raw) > 0xFFFF:
        raise ControlProtocolError("string field too long")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(body: bytes, off: int) -> tuple:
    if off + 2 > len(body):
        raise ControlProtocolError("truncated string length")
    (n,) = struct.unpack_from("<H", body, off)
    off += 2
    if off + n > len(body):
        raise ControlProtocolError("truncated string body")
    return body[off:off + n].decode(), off + n


@dataclass(frozen=True)
class Request:
    opcode: int
    ctx_id: int = 0
    tid: int = 0
    flags: int = 0
    text: str = ""
    text2: str = ""


@dataclass(frozen=True)
class Reply:
    status: int
    code: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OK


def encode_request(req: Request) -> bytes:
    body = struct.pack("<BB", VERSION, req.opcode)
    if req.opcode == CREATE_CTX:
        body += _pack_str(req.text)
    elif req.opcode == SET_CPUS:
        body += struct.pack("<I", req.ctx_id) + _pack_str(req.text)
    elif req.opcode == SETENV:
        body += struct.pack("<I", req.ctx_id) + _pack_str(req.text) + _pack_str(req.text2)
    elif req.opcode == UNSETENV:
        body += struct.pack("<I", req.ctx_id) + _pack_str(req.text)
    elif req.opcode == BIND:
        body += struct.pack("<IIB", req.ctx_id, req.tid, req.flags)
    elif req.opcode == UNBIND:
        body += struct.pack("<I", req.tid)
    elif req.opcode == SHUTDOWN:
        pass
    else:
        raise ControlProtocolError(f"unknown opcode {req.opcode}")
    return struct.pack("<I", len(body)) + body


def decode_request(body: bytes) -> Request:
    if len(body) < 2:
        raise ControlProtocolError("short request body")
    version, opcode = struct.unpack_from("<BB", body, 0)
    if version != VERSION:
        raise ControlProtocolError(f"unsupported protocol version {version}")
    off = 2
    if opcode == CREATE_CTX:
        text, off = _unpack_str(body, off)
        return Request(opcode, text=text)
    if opcode == SET_CPUS:
        (ctx_id,) = struct.unpack_from("<I", body, off)
        text, off = _unpack_str(body, off + 4)
        return Request(opcode, ctx_id=ctx_id, text=text)
    if opcode == SETENV:
        (ctx_id,) = struct.unpack_from("<I", body, off)
        name, off = _unpack_str(body, off + 4)
        value, off = _unpack_str(body, off)
        return Request(opcode, ctx_id=ctx_id, text=name, text2=value)
    if opcode == UNSETENV:
        (ctx_id,) = struct.unpack_from("<I", body, off)
        name, off = _unpack_str(body, off + 4)
        return Request(opcode, ctx_id=ctx_id, text=name)
    if opcode == BIND:
        ctx_id, tid, flags = struct.unpack_from("<IIB", body, off)
        return Request(opcode, ctx_id=ctx_id, tid=tid, flags=flags)
    if opcode == UNBIND:
        (tid,) = struct.unpack_from("<I", body, off)
        return Request(opcode, tid=tid)
    if opcode == SHUTDOWN:
        return Request(opcode)
    raise ControlProtocolError(f"unknown opcode {opcode}")


def encode_reply(reply: Reply) -> bytes:
    body = struct.pack("<BBi", VERSION, reply.status, reply.code) + _pack_str(reply.message)
    return struct.pack("<I", len(body)) + body


def decode_reply(body: bytes) -> Reply:
    if len(body) < 6:
        raise ControlProtocolError("short reply body")
    version, status, code = struct.unpack_from("<BBi", body, 0)
    if version != VERSION:
        raise ControlProtocolError(f"unsupported protocol version {version}")
    message, _ = _unpack_str(body, 6)
    return Reply(status=status, code=code, message=message)


def read_frame(fd: int) -> Optional[bytes]:
    """Read one length-prefixed frame; None on EOF at a frame boundary."""
    header = _read_exact(fd, 4)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header)
    if length > 1 << 20:
        raise ControlProtocolError(f"oversized frame ({length} bytes)")
    body = _read_exact(fd, length)
    if body is None:
        raise ControlProtocolError("truncated frame")
    return body


def _read_exact(fd: int, n: int) -> Optional[bytes]:
    chunks = b""
    while len(chunks) < n:
        part = os.read(fd, n - len(chunks))
        if not part:
            return None if not chunks else None
        chunks += part
    return chunks


class ControlClient:
    """Client side of the channel; serializes round trips."""

    def __init__(self, write_fd: int, read_fd: int):
        self._write_fd = write_fd
        self._read_fd = read_fd
        self._lock = threading.Lock()

    def call(self, req: Request) -> Reply:
        frame = encode_request(req)
        with self._lock:
            os.write(self._write_fd, frame)
            body = read_frame(self._read_fd)
        if body is None:
            raise LibctxError("monitor closed the control channel")
        return decode_reply(body)

    def call_ok(self, req: Request) -> Reply:
        reply = self.call(req)
        if not reply.ok:
            raise LibctxError(f"monitor refused request {req.opcode}: {reply.message}")
        return reply

    def close(self) -> None:
        for fd in (self._write_fd, self._read_fd):
            try:
                os.close(fd)
            except OSError:
                pass


class ControlServer:
    """Server side: applies requests to a monitor-owned registry."""

    def __init__(self, read_fd: int, write_fd: int, handler):
        self._read_fd = read_fd
        self._write_fd = write_fd
        self._handler = handler
        self._thread: Optional[threading.Thread] = None

    def serve_forever(self) -> None:
        while True:
            try:
                body = read_frame(self._read_fd)
            except (OSError, ControlProtocolError):
                return
            if body is None:
                return
            try:
                req = decode_request(body)
                reply = self._handler(req)
            except LibctxError as exc:
                reply = Reply(status=ERR, code=1, message=str(exc))
            except Exception as exc:  # noqa: BLE001 - keep the channel alive
                reply = Reply(status=ERR, code=2, message=f"internal error: {exc}")
            try:
                os.write(self._write_fd, encode_reply(reply))
            except OSError:
                return
            if req is not None and req.opcode == SHUTDOWN and reply.ok:
                continue

    def start_thread(self) -> threading.Thread:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="libctx-control")
        self._thread.start()
        return self._thread


def apply_request(monitor, req: Request) -> Reply:
    """Shared request semantics used by the in-process monitor."""
    if req.opcode == CREATE_CTX:
        ctx_id = monitor.create_context(parse_cpu_list(req.text))
        return Reply(OK, code=ctx_id)
    if req.opcode == SET_CPUS:
        monitor.set_allowed_cpus(req.ctx_id, parse_cpu_list(req.text))
        return Reply(OK)
    if req.opcode == SETENV:
        monitor.setenv(req.ctx_id, req.text, req.text2)
        return Reply(OK)
    if req.opcode == UNSETENV:
        monitor.unsetenv(req.ctx_id, req.text)
        return Reply(OK)
    if req.opcode == BIND:
        monitor.registry.rebind_thread(req.tid, req.ctx_id)
        if req.flags & BIND_WITH_AFFINITY:
            monitor.enforce_affinity(req.tid, monitor.registry.get(req.ctx_id))
        return Reply(OK)
    if req.opcode == UNBIND:
        monitor.registry.unbind(req.tid)
        return Reply(OK)
    if req.opcode == SHUTDOWN:
        monitor.passthrough()
        return Reply(OK)
    return Reply(ERR, code=22, message=f"unknown opcode {req.opcode}")


def describe_cpus(cpus) -> str:
    return format_cpu_list(cpus)
