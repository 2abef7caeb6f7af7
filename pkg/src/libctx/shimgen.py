"""Generate forwarding-shim source: per symbol, a trampoline that loads the
target address from the calling thread's jump table (or, for service
shims, from the shared address page at a fixed index) and tail-jumps to
it, preserving every argument register and creating no stack frame.

Supported targets: x86_64 (System V AMD64) and aarch64 (AAPCS64).  Only
unversioned symbols are handled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import ShimGenerationError

SUPPORTED_ARCHES = ("x86_64", "aarch64")


# --- minimal ELF dynamic symbol table reader ---------------------------------

_ELF_MAGIC = b"\x7fELF"
_SHT_DYNSYM = 11
_STT_FUNC = 2
_STT_GNU_IFUNC = 10
_SHN_UNDEF = 0


@dataclass(frozen=True)
class DynamicSymbol:
    name: str
    defined: bool
    is_function: bool


def read_dynamic_symbols(path: str) -> dict:
    """Names exported by a shared object's .dynsym, keyed by name."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _ELF_MAGIC:
        raise ShimGenerationError(f"{path!r} is not an ELF file")
    is64 = data[4] == 2
    little = data[5] == 1
    if not is64 or not little:
        raise ShimGenerationError("only little-endian 64-bit ELF is supported")
    e_shoff, = struct.unpack_from("<Q", data, 0x28)
    e_shentsize, = struct.unpack_from("<H", data, 0x3A)
    e_shnum, = struct.unpack_from("<H", data, 0x3C)
    symbols: dict[str, DynamicSymbol] = {}
    for i in range(e_shnum):
        base = e_shoff + i * e_shentsize
        sh_type, = struct.unpack_from("<I", data, base + 4)
        if sh_type != _SHT_DYNSYM:
            continue
        sh_offset, sh_size = struct.unpack_from("<QQ", data, base + 0x18)
        sh_link, = struct.unpack_from("<I", data, base + 0x28)
        sh_entsize, = struct.unpack_from("<Q", data, base + 0x38)
        str_base = e_shoff + sh_link * e_shentsize
        str_offset, str_size = struct.unpack_from("<QQ", data, str_base + 0x18)
        strtab = data[str_offset:str_offset + str_size]
        count = sh_size // sh_entsize if sh_entsize else 0
        for j in range(count):
            off = sh_offset + j * sh_entsize
            st_name, st_info, _st_other, st_shndx = struct.unpack_from(
                "<IBBH", data, off
            )
            if st_name == 0:
                continue
            end = strtab.find(b"\x00", st_name)
            name = strtab[st_name:end].decode(errors="replace")
            st_type = st_info & 0xF
            symbols[name] = DynamicSymbol(
                name=name,
                defined=st_shndx != _SHN_UNDEF,
                is_function=st_type in (_STT_FUNC, _STT_GNU_IFUNC),
            )
    if not symbols:
        raise ShimGenerationError(f"{path!r} has no dynamic symbol table")
    return symbols


# --- trampoline emission --------------------------------------------------------

_X86_TABLE_TRAMPOLINE = """\
__asm__(
    ".text\\n"
    ".globl {sym}\\n"
    ".type {sym}, @function\\n"
    "{sym}:\\n"
    "    movq __shim_table@gottpoff(%rip), %r11\\n"
    "    movq %fs:(%r11), %r11\\n"
    "    movq {offset}(%r11), %r11\\n"
    "    jmp *%r11\\n"
    ".size {sym}, .-{sym}\\n"
);
"""

_X86_PAGE_TRAMPOLINE = """\
__asm__(
    ".text\\n"
    ".globl {sym}\\n"
    ".type {sym}, @function\\n"
    "{sym}:\\n"
    "    movq __shim_page(%rip), %r11\\n"
    "    movq {offset}(%r11), %r11\\n"
    "    jmp *%r11\\n"
    ".size {sym}, .-{sym}\\n"
);
"""

_A64_TABLE_TRAMPOLINE = """\
__asm__(
    ".text\\n"
    ".globl {sym}\\n"
    ".type {sym}, %function\\n"
    "{sym}:\\n"
    "    mrs x16, tpidr_el0\\n"
    "    adrp x17, :gottprel:__shim_table\\n"
    "    ldr x17, [x17, #:gottprel_lo12:__shim_table]\\n"
    "    ldr x16, [x16, x17]\\n"
    "    ldr x16, [x16, #{offset}]\\n"
    "    br x16\\n"
    ".size {sym}, .-{sym}\\n"
);
"""

_A64_PAGE_TRAMPOLINE = """\
__asm__(
    ".text\\n"
    ".globl {sym}\\n"
    ".type {sym}, %function\\n"
    "{sym}:\\n"
    "    adrp x16, __shim_page\\n"
    "    ldr x16, [x16, #:lo12:__shim_page]\\n"
    "    ldr x16, [x16, #{offset}]\\n"
    "    br x16\\n"
    ".size {sym}, .-{sym}\\n"
);
"""

_HEADER = """\
/* Forwarding shims for {library}.
 *
 * Each trampoline performs one indirect load and a tail jump; argument
 * registers are untouched and no stack frame is created.  The runtime
 * points __shim_table at the calling thread's per-context address table
 * ({mode_desc}).
 */

__attribute__((visibility("hidden"))) void **__shim_page;
__attribute__((visibility("hidden"))) __thread void **__shim_table
    __attribute__((tls_model("initial-exec")));

void __shim_set_table(void **table) {{ __shim_table = table; }}
void __shim_set_page(void **page) {{ __shim_page = page; }}
"""


def generate_shim(
    library_path: str,
    symbols: list,
    arch: str = "x86_64",
    service: bool = False,
    symbol_table: dict | None = None,
    ordinals: dict | None = None,
) -> str:
    """Emit compilable C-with-inline-assembly forwarding shims.

    ``symbols`` must be exported by the library (checked against its
    dynamic symbol table, or against ``symbol_table`` when provided).
    Table shims index the per-thread jump table by process-wide symbol
    ordinal (``ordinals`` overrides the default declaration-order
    numbering); service shims index the shared address page by position.
    """
    if not symbols:
        raise ShimGenerationError("no symbols requested")
    if arch not in SUPPORTED_ARCHES:
        raise ShimGenerationError(
            f"unsupported architecture {arch!r} (supported: {', '.join(SUPPORTED_ARCHES)})"
        )
    exported = symbol_table if symbol_table is not None else read_dynamic_symbols(library_path)
    missing = [s for s in symbols if s not in exported or not exported[s].defined]
    if missing:
        raise ShimGenerationError(
            f"symbols not exported by {library_path}: {', '.join(missing)}"
        )

    if service:
        template = _X86_PAGE_TRAMPOLINE if arch == "x86_64" else _A64_PAGE_TRAMPOLINE
        mode_desc = "service mode: fixed indices into the shared address page"
    else:
        template = _X86_TABLE_TRAMPOLINE if arch == "x86_64" else _A64_TABLE_TRAMPOLINE
        mode_desc = "table mode: slots indexed by symbol ordinal"

    parts = [_HEADER.format(library=library_path, mode_desc=mode_desc)]
    for position, sym in enumerate(symbols):
        if not sym.isidentifier():
            raise ShimGenerationError(f"symbol {sym!r} is not a plain C identifier")
        index = position if service or ordinals is None else ordinals[sym]
        parts.append(template.format(sym=sym, offset=index * 8))
    return "\n".join(parts)
