"""libctx: partition CPU resources among sets of dynamically loaded
libraries within one process, and among supervised child processes.

Resource-query syscalls and resource files are virtualized per context,
per-context CPU affinity is enforced by a tracing monitor, library
instances are isolated in linker namespaces, and core partitions can be
auto-tuned by grid search.
"""

from .cpuset import (
    MAX_CPUS,
    CpuSet,
    decode_kernel_mask,
    encode_kernel_mask,
    format_cpu_list,
    parse_cpu_list,
)
from .errors import (
    ConfigError,
    CpuListParseError,
    DispatchError,
    FilterError,
    ForgeError,
    LibctxError,
    LoaderError,
    MaskEncodingError,
    MonitorError,
    NamespaceCapError,
    RegistryError,
    ShimGenerationError,
    SpawnError,
    TopologyError,
)
from .forge import ForgeStore, forge_cpuinfo, forge_online
from .inprocess import Runtime
from .monitor import Monitor, SupervisedTask
from .nsload import NamespaceLoader
from .registry import Context, Registry
from .shimgen import generate_shim
from .topology import HostTopology, read_host_topology
from .tuner import TuneResult, enumerate_partitions, run_grid

__version__ = "0.1.0"

__all__ = [
    "MAX_CPUS",
    "CpuSet",
    "parse_cpu_list",
    "format_cpu_list",
    "encode_kernel_mask",
    "decode_kernel_mask",
    "HostTopology",
    "read_host_topology",
    "ForgeStore",
    "forge_cpuinfo",
    "forge_online",
    "Registry",
    "Context",
    "Monitor",
    "SupervisedTask",
    "Runtime",
    "NamespaceLoader",
    "generate_shim",
    "TuneResult",
    "enumerate_partitions",
    "run_grid",
    "LibctxError",
    "CpuListParseError",
    "MaskEncodingError",
    "TopologyError",
    "RegistryError",
    "NamespaceCapError",
    "LoaderError",
    "DispatchError",
    "ShimGenerationError",
    "ForgeError",
    "MonitorError",
    "SpawnError",
    "FilterError",
    "ConfigError",
    "__version__",
]
