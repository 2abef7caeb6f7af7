"""CPU sets: parsing, formatting, and kernel affinity-mask encoding.

A :class:`CpuSet` is an immutable bitmask over logical CPU ids
``0..MAX_CPUS-1``.  It is the unit of resource allocation everywhere in
the runtime: context allowances, affinity rewrites, and forged resource
files all operate on CpuSets.
"""

from __future__ import annotations

from typing import Iterable, Iterator

from .errors import CpuListParseError, MaskEncodingError

#: Capacity of every CpuSet, matching common kernel cpumask sizing.
MAX_CPUS = 1024

#: Affinity buffers are sized in multiples of the native word.
WORD_BYTES = 8


class CpuSet:
    """Immutable set of logical CPU ids backed by an int bitmask."""

    __slots__ = ("_bits",)

    def __init__(self, cpus: Iterable[int] = ()):
        bits = 0
        for cpu in cpus:
            if not 0 <= cpu < MAX_CPUS:
                raise CpuListParseError(
                    f"cpu id {cpu} outside 0..{MAX_CPUS - 1}", token=str(cpu)
                )
            bits |= 1 << cpu
        object.__setattr__(self, "_bits", bits)

    def __setattr__(self, name, value):
        raise AttributeError("CpuSet is immutable")

    @classmethod
    def from_bits(cls, bits: int) -> "CpuSet":
        if bits < 0 or bits >> MAX_CPUS:
            raise CpuListParseError(f"bitmask exceeds {MAX_CPUS} cpus", token=hex(bits))
        s = cls.__new__(cls)
        object.__setattr__(s, "_bits", bits)
        return s

    @property
    def bits(self) -> int:
        return self._bits

    def count(self) -> int:
        return bin(self._bits).count("1")

    def __len__(self) -> int:
        return self.count()

    def __bool__(self) -> bool:
        return self._bits != 0

    def __contains__(self, cpu: int) -> bool:
        return 0 <= cpu < MAX_CPUS and bool(self._bits >> cpu & 1)

    def __iter__(self) -> Iterator[int]:
        bits = self._bits
        cpu = 0
        while bits:
            if bits & 1:
                yield cpu
            bits >>= 1
            cpu += 1

    def __eq__(self, other) -> bool:
        return isinstance(other, CpuSet) and self._bits == other._bits

    def __hash__(self) -> int:
        return hash(self._bits)

    def __and__(self, other: "CpuSet") -> "CpuSet":
        return CpuSet.from_bits(self._bits & other._bits)

    def __or__(self, other: "CpuSet") -> "CpuSet":
        return CpuSet.from_bits(self._bits | other._bits)

    def __sub__(self, other: "CpuSet") -> "CpuSet":
        return CpuSet.from_bits(self._bits & ~other._bits)

    def issubset(self, other: "CpuSet") -> bool:
        return self._bits & ~other._bits == 0

    def __repr__(self) -> str:
        return f"CpuSet({format_cpu_list(self)!r})"


def parse_cpu_list(text: str) -> CpuSet:
    """Expand kernel cpulist syntax ("0-11", "0-2,5,7-8", "3") into a CpuSet.

    Whitespace around tokens is tolerated.  Malformed tokens, reversed
    ranges, and ids >= MAX_CPUS raise :class:`CpuListParseError` naming
    the offending token.
    """
    if not isinstance(text, str) or not text.strip():
        raise CpuListParseError("empty cpu list", token=text if isinstance(text, str) else "")
    bits = 0
    for raw in text.split(","):
        token = raw.strip()
        if not token:
            raise CpuListParseError(f"empty token in cpu list {text!r}", token=raw)
        lo, sep, hi = token.partition("-")
        try:
            start = int(lo)
            end = int(hi) if sep else start
        except ValueError:
            raise CpuListParseError(f"malformed cpu token {token!r}", token=token) from None
        if start < 0 or end < 0:
            raise CpuListParseError(f"negative cpu id in token {token!r}", token=token)
        if end < start:
            raise CpuListParseError(f"reversed range {token!r}", token=token)
        if end >= MAX_CPUS:
            raise CpuListParseError(
                f"cpu id {end} outside 0..{MAX_CPUS - 1} in token {token!r}", token=token
            )
        bits |= ((1 << (end - start + 1)) - 1) << start
    return CpuSet.from_bits(bits)


def format_cpu_list(s: CpuSet) -> str:
    """Render a CpuSet as minimal ascending comma-separated ranges.

    The empty set renders as "".  parse_cpu_list(format_cpu_list(s)) == s.
    """
    runs = []
    start = prev = None
    for cpu in s:
        if start is None:
            start = prev = cpu
        elif cpu == prev + 1:
            prev = cpu
        else:
            runs.append((start, prev))
            start = prev = cpu
    if start is not None:
        runs.append((start, prev))
    return ",".join(f"{a}-{b}" if b > a else f"{a}" for a, b in runs)


def required_mask_bytes(s: CpuSet) -> int:
    """Smallest valid affinity buffer for ``s``: bit bytes rounded up to a word."""
    if not s:
        return 0
    highest = s.bits.bit_length() - 1
    raw = (highest + 1 + 7) // 8
    return ((raw + WORD_BYTES - 1) // WORD_BYTES) * WORD_BYTES


def encode_kernel_mask(s: CpuSet, buffer_len: int) -> bytes:
    """Encode a CpuSet in the kernel affinity ABI: little-endian, one bit
    per CPU, trailing bytes zeroed out to ``buffer_len``.

    Raises :class:`MaskEncodingError` when the buffer cannot hold the set;
    callers fall back to not rewriting and log.
    """
    if buffer_len < 0:
        raise MaskEncodingError(f"negative buffer length {buffer_len}")
    needed = required_mask_bytes(s)
    if buffer_len < needed:
        raise MaskEncodingError(
            f"buffer of {buffer_len} bytes cannot hold cpus {format_cpu_list(s)!r}"
            f" (needs {needed})"
        )
    return s.bits.to_bytes(buffer_len, "little")


def decode_kernel_mask(data: bytes) -> CpuSet:
    """Inverse of :func:`encode_kernel_mask`."""
    return CpuSet.from_bits(int.from_bytes(data, "little"))
