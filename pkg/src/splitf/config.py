"""Flat ``key = value`` run configuration.

One setting per line; blank lines and ``#`` comments are ignored. Keys use
the long flag names with dashes or underscores (``max-new = 64``). Values
stay strings here; the CLI converts them with the same parser it uses for
the matching flag. Precedence, lowest first: built-in defaults, the config
file, ``SPLITF_ENDPOINT`` / ``SPLITF_SEED``, explicit flags.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

ENV_OVERRIDES = {"SPLITF_ENDPOINT": "server", "SPLITF_SEED": "seed"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def load_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {dest: environ[var] for var, dest in ENV_OVERRIDES.items() if environ.get(var)}
