"""Host CPU topology snapshot: online set plus raw cpuinfo stanzas.

The snapshot is taken once at monitor initialization; CPU hotplug after
that point is not tracked.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .cpuset import CpuSet, parse_cpu_list
from .errors import TopologyError

ONLINE_PATH = "/sys/devices/system/cpu/online"
CPUINFO_PATH = "/proc/cpuinfo"

_PROCESSOR_RE = re.compile(r"^processor\s*:\s*(\d+)\s*$", re.M)


@dataclass(frozen=True)
class HostTopology:
    """Online CPUs and the per-processor stanzas of the host cpuinfo text.

    ``stanzas`` maps processor id to the exact byte range of its stanza,
    including the separator blank line, so that concatenating stanzas
    reproduces the original file text.
    """

    online: CpuSet
    cpuinfo_text: str
    stanzas: dict = field(default_factory=dict)

    def stanza_ids(self) -> CpuSet:
        return CpuSet(self.stanzas.keys())


def split_cpuinfo(text: str) -> dict:
    """Split cpuinfo text into {processor_id: stanza_text} preserving bytes.

    Each stanza runs from its "processor : N" line to the start of the
    next one (or end of file), so separators stay attached to the stanza
    that precedes them.
    """
    stanzas: dict[int, str] = {}
    matches = list(_PROCESSOR_RE.finditer(text))
    if not matches:
        raise TopologyError("no processor stanzas found in cpuinfo text")
    for i, m in enumerate(matches):
        start = m.start()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        pid = int(m.group(1))
        if pid in stanzas:
            raise TopologyError(f"duplicate processor stanza {pid}")
        stanzas[pid] = text[start:end]
    return stanzas


def read_host_topology(online_path: str = ONLINE_PATH,
                       cpuinfo_path: str = CPUINFO_PATH) -> HostTopology:
    """Read the online CPU list and cpuinfo stanzas from the host."""
    try:
        with open(online_path) as f:
            online = parse_cpu_list(f.read().strip())
        with open(cpuinfo_path) as f:
            text = f.read()
    except OSError as e:
        raise TopologyError(f"cannot read host cpu description: {e}") from e
    stanzas = split_cpuinfo(text)
    missing = online - CpuSet(stanzas.keys())
    if missing:
        raise TopologyError(
            f"online cpus {missing!r} have no cpuinfo stanza"
        )
    return HostTopology(online=online, cpuinfo_text=text, stanzas=stanzas)
