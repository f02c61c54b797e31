# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Run configuration resolved from flags, the environment and ``settings.ini``.

Resolution order per setting: command-line flag, environment variable,
``[fuseguard]`` section of the ini file given with ``--config``, built-in
default. Without ``--config`` decouple looks for ``settings.ini`` or ``.env``
in the working directory.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from decouple import AutoConfig, Config, RepositoryIni, UndefinedValueError  # type: ignore

from .errors import ConfigError

logger = logging.getLogger(__name__)

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class FuseGuardIni(RepositoryIni):
    """``RepositoryIni`` reading the ``[fuseguard]`` section."""

    SECTION = "fuseguard"


def load_settings(path: Optional[Path] = None) -> Callable[..., Any]:
    """Return a decouple ``config`` callable for ``path`` (or the working directory)."""
    if path is None:
        return AutoConfig(search_path=os.getcwd())
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", context={"path": str(path)})
    return Config(FuseGuardIni(str(path)))


def _setting(settings: Callable[..., Any], name: str, default: Any, cast: Callable[[Any], Any]) -> Any:
    try:
        return settings(name, default=default, cast=cast)
    except (ValueError, UndefinedValueError) as e:
        raise ConfigError(f"Invalid value for {name}: {e}", context={"setting": name}) from e


def resolve_seed(flag: Optional[int], settings: Callable[..., Any]) -> int:
    if flag is not None:
        return int(flag)
    return int(_setting(settings, "FUSEGUARD_SEED", 0, int))


def resolve_jobs(flag: Optional[int], settings: Callable[..., Any]) -> int:
    jobs = flag if flag is not None else _setting(settings, "FUSEGUARD_JOBS", os.cpu_count() or 1, int)
    if int(jobs) < 1:
        raise ConfigError("--jobs must be at least 1", context={"jobs": jobs})
    return int(jobs)


def resolve_log_level(verbose: bool, settings: Callable[..., Any]) -> int:
    if verbose:
        return logging.DEBUG
    name = str(_setting(settings, "FUSEGUARD_LOG", "info", str)).strip().lower()
    if name not in LOG_LEVELS:
        logger.warning(f"Unknown FUSEGUARD_LOG value {name!r}; using info")
        return logging.INFO
    return LOG_LEVELS[name]


@dataclass
class RunConfig:
    """Fully resolved invocation of one subcommand."""

    command: str
    seed: int = 0
    jobs: int = 1
    log_level: int = logging.INFO
    options: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Artifact echo, without the worker count."""
        return {
            "command": self.command,
            "seed": self.seed,
            "options": dict(self.options),
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
        }

    def option(self, name: str, default: Any = None) -> Any:
        return self.options.get(name, default)
