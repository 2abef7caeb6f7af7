"""Per-context forged resource files restricted to the allowed CPU set.

Each context gets its own directory holding replicas of /proc/cpuinfo and
/sys/devices/system/cpu/online that list only the context's CPUs.  Files
are swapped atomically (write-to-temp + rename) so a reader never sees a
truncated file; already-open descriptors keep the old contents.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass, field

from .cpuset import CpuSet, format_cpu_list
from .errors import ForgeError
from .log import get_logger
from .topology import CPUINFO_PATH, ONLINE_PATH, HostTopology

logger = get_logger("libctx.forge")

DIR_PREFIX = "libctx-"


def forge_cpuinfo(topo: HostTopology, allowed: CpuSet) -> str:
    """Concatenate the host stanzas for exactly the allowed ids, ascending.

    Stanzas are byte-identical to the host's (processor ids are NOT
    renumbered, so cpuinfo agrees with the virtualized affinity mask).
    """
    parts = []
    for cpu in allowed:
        stanza = topo.stanzas.get(cpu)
        if stanza is None:
            raise ForgeError(f"cpu {cpu} has no host cpuinfo stanza")
        parts.append(stanza)
    return "".join(parts)


def forge_online(allowed: CpuSet) -> str:
    """Kernel online-file format: the cpu list plus a trailing newline."""
    if not allowed:
        raise ForgeError("cannot forge online file for an empty cpu set")
    return format_cpu_list(allowed) + "\n"


@dataclass
class ForgedFileSet:
    """Forged replicas for one context: canonical path -> forged path."""

    ctx_id: int
    directory: str
    files: dict = field(default_factory=dict)
    generation: int = 0


class ForgeStore:
    """Owns forged directories for all contexts of one monitor."""

    def __init__(self, topo: HostTopology, root: str | None = None, owner_pid: int | None = None):
        self._topo = topo
        self._root = root or tempfile.gettempdir()
        self._owner = owner_pid if owner_pid is not None else os.getpid()
        self._sets: dict[int, ForgedFileSet] = {}
        os.makedirs(self._root, exist_ok=True)
        sweep_stale(self._root)

    @property
    def root(self) -> str:
        return self._root

    def get(self, ctx_id: int) -> ForgedFileSet | None:
        return self._sets.get(ctx_id)

    def refresh(self, ctx_id: int, allowed: CpuSet) -> ForgedFileSet:
        """(Re)generate the forged files for a context atomically."""
        fs = self._sets.get(ctx_id)
        if fs is None:
            directory = os.path.join(self._root, f"{DIR_PREFIX}{self._owner}-{ctx_id}")
            os.makedirs(directory, exist_ok=True)
            os.chmod(directory, 0o755)
            fs = ForgedFileSet(ctx_id=ctx_id, directory=directory)
            self._sets[ctx_id] = fs
        contents = {
            CPUINFO_PATH: forge_cpuinfo(self._topo, allowed),
            ONLINE_PATH: forge_online(allowed),
        }
        for canonical, text in contents.items():
            name = canonical.strip("/").replace("/", "_")
            final = os.path.join(fs.directory, name)
            tmp = final + f".tmp.{fs.generation + 1}"
            with open(tmp, "w") as f:
                f.write(text)
            os.chmod(tmp, 0o644)
            os.replace(tmp, final)
            fs.files[canonical] = final
        fs.generation += 1
        logger.debug("forged ctx %d gen %d under %s", ctx_id, fs.generation, fs.directory)
        return fs

    def forged_path(self, ctx_id: int, canonical: str) -> str | None:
        fs = self._sets.get(ctx_id)
        if fs is None:
            return None
        return fs.files.get(canonical)

    def drop(self, ctx_id: int) -> None:
        fs = self._sets.pop(ctx_id, None)
        if fs is not None:
            shutil.rmtree(fs.directory, ignore_errors=True)

    def cleanup(self) -> None:
        for ctx_id in list(self._sets):
            self.drop(ctx_id)


def sweep_stale(root: str) -> int:
    """Remove forged directories left behind by dead monitors.

    Directory names carry the owning pid; anything whose pid is gone is
    swept by prefix match.  Returns the number of directories removed.
    """
    removed = 0
    try:
        entries = os.listdir(root)
    except OSError:
        return 0
    for name in entries:
        if not name.startswith(DIR_PREFIX):
            continue
        parts = name[len(DIR_PREFIX):].split("-")
        if not parts or not parts[0].isdigit():
            continue
        pid = int(parts[0])
        if pid and _pid_alive(pid):
            continue
        shutil.rmtree(os.path.join(root, name), ignore_errors=True)
        removed += 1
    return removed


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
