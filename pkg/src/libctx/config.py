"""Run configuration: a JSON file declaring the contexts to create and the
command to supervise under each.

    {
      "contexts": [
        {"name": "blas", "cpus": "0-11", "env": {"OMP_NUM_THREADS": "6"},
         "argv": ["./solver", "--size", "big"]}
      ],
      "options": {"trace_all": false, "forge_root": "/tmp"}
    }

``env`` values may be null to unset a variable in the child.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .cpuset import parse_cpu_list
from .errors import ConfigError, CpuListParseError


@dataclass
class ContextSpec:
    name: str
    cpus: str
    argv: list
    env: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    contexts: list
    trace_all: bool = False
    forge_root: Optional[str] = None


def parse_config_text(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    entries = raw.get("contexts")
    if not isinstance(entries, list) or not entries:
        raise ConfigError('"contexts" must be a non-empty array')

    contexts = []
    names = set()
    for i, entry in enumerate(entries):
        where = f"contexts[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where} must be an object")
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise ConfigError(f"{where}.name must be a non-empty string")
        if name in names:
            raise ConfigError(f"duplicate context name {name!r}")
        names.add(name)
        cpus = entry.get("cpus")
        if not isinstance(cpus, str):
            raise ConfigError(f"{where}.cpus must be a cpu-list string")
        try:
            parse_cpu_list(cpus)
        except CpuListParseError as exc:
            raise ConfigError(f"{where}.cpus: {exc}") from exc
        argv = entry.get("argv")
        if (not isinstance(argv, list) or not argv
                or not all(isinstance(a, str) for a in argv)):
            raise ConfigError(f"{where}.argv must be a non-empty array of strings")
        env = entry.get("env", {})
        if not isinstance(env, dict):
            raise ConfigError(f"{where}.env must be an object")
        for key, value in env.items():
            if not isinstance(key, str) or not key or "=" in key:
                raise ConfigError(f"{where}.env has an invalid variable name {key!r}")
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{where}.env[{key!r}] must be a string or null")
        contexts.append(ContextSpec(name=name, cpus=cpus, argv=list(argv), env=dict(env)))

    options = raw.get("options", {})
    if not isinstance(options, dict):
        raise ConfigError('"options" must be an object')
    trace_all = options.get("trace_all", False)
    if not isinstance(trace_all, bool):
        raise ConfigError("options.trace_all must be a boolean")
    forge_root = options.get("forge_root")
    if forge_root is not None and not isinstance(forge_root, str):
        raise ConfigError("options.forge_root must be a string")
    return RunConfig(contexts=contexts, trace_all=trace_all, forge_root=forge_root)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text)
