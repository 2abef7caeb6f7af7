"""Build-on-demand C helper executables (probe, spinner, work, bench).

Sources ship inside the package; binaries are compiled once into a cache
directory keyed by a content hash, so editing a source invalidates its
binary.  Override the cache location with LIBCTX_HELPER_CACHE.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
import tempfile

from ..errors import LibctxError

HELPERS = ("probe", "spinner", "work", "bench")

_SOURCE_DIR = os.path.dirname(os.path.abspath(__file__))


class HelperBuildError(LibctxError):
    pass


def _compiler() -> str:
    for name in ("cc", "gcc", "clang"):
        path = shutil.which(name)
        if path:
            return path
    raise HelperBuildError("no C compiler found (tried cc, gcc, clang)")


def cache_dir() -> str:
    override = os.environ.get("LIBCTX_HELPER_CACHE")
    if override:
        return override
    return os.path.join(tempfile.gettempdir(), f"libctx-helpers-{os.getuid()}")


def helper_path(name: str) -> str:
    """Path of a helper binary, building it if missing or stale."""
    if name not in HELPERS:
        raise HelperBuildError(f"unknown helper {name!r}")
    source = os.path.join(_SOURCE_DIR, f"{name}.c")
    with open(source, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()[:16]
    directory = cache_dir()
    os.makedirs(directory, exist_ok=True)
    binary = os.path.join(directory, f"{name}-{digest}")
    if os.path.exists(binary):
        return binary
    tmp = binary + f".build.{os.getpid()}"
    cmd = [_compiler(), "-O2", "-pthread", "-o", tmp, source]
    result = subprocess.run(cmd, capture_output=True, text=True)
    if result.returncode != 0:
        raise HelperBuildError(
            f"building helper {name} failed:\n{result.stderr.strip()}"
        )
    os.replace(tmp, binary)
    return binary


def build_all() -> dict:
    return {name: helper_path(name) for name in HELPERS}
