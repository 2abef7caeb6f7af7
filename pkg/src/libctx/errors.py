"""Exception hierarchy for the libctx runtime."""


class LibctxError(Exception):
    """Base class for all libctx errors."""


class CpuListParseError(LibctxError):
    """A CPU list string could not be parsed; carries the offending token."""

    def __init__(self, message: str, token: str = ""):
        super().__init__(message)
        self.token = token


class MaskEncodingError(LibctxError):
    """A CPU set does not fit the caller-supplied affinity buffer."""


class TopologyError(LibctxError):
    """Host CPU description files are missing or unparsable."""


class RegistryError(LibctxError):
    """Invalid context operation (unknown id, empty set, double bind, ...)."""


class NamespaceCapError(LibctxError):
    """The linker-namespace budget (16 including the base namespace) is spent."""


class LoaderError(LibctxError):
    """Dynamic loader failure; message carries the loader's own text."""


class DispatchError(LibctxError):
    """Jump-table dispatch failure. ``code`` distinguishes the cause."""

    UNBOUND_THREAD = 1
    MISSING_SLOT = 2

    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class ShimGenerationError(LibctxError):
    """Shim source generation failed (unknown symbol, bad architecture, ...)."""


class ForgeError(LibctxError):
    """A forged resource file could not be generated."""


class MonitorError(LibctxError):
    """Supervisor failure: attach denied, filter rejected, spawn failed."""


class SpawnError(MonitorError):
    """A supervised child could not be started."""


class FilterError(MonitorError):
    """The kernel rejected the syscall filter installation."""


class ControlProtocolError(LibctxError):
    """Malformed control-channel message."""


class ConfigError(LibctxError):
    """Run configuration file is syntactically or semantically invalid."""
