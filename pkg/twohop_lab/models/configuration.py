#
# This file is part of twohop-lab
# Copyright (c) 2024-2025, the twohop-lab developers.
# All rights reserved.
#
# Identity-bridge experiments for two-hop compositional reasoning
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
"""
Lookup of run defaults from rc files and the environment, and loading of
JSON run configuration documents.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, NamedTuple, TypeVar

from ..exceptions import CorruptFile, InvalidConfig

_LOGGER = logging.getLogger(__name__)

_CONFIG_FILE_NAME = ".twohoprc"
_LOG_LEVELS = ("error", "warning", "info", "debug")

TConfig = TypeVar("TConfig", bound=NamedTuple)


def _get_from_file(rc_parent: Path, prop_name: str) -> str | None:
    """
    Retrieve a property value from a file.

    :param rc_parent: The parent directory of the file.
    :param prop_name: The name of the property to retrieve.
    :returns: The value of the property if found, otherwise None.
    """
    rc_file = rc_parent / _CONFIG_FILE_NAME
    if rc_file.is_file():
        with rc_file.open() as fh:
            config = fh.readlines()

        for line in config:
            name, sep, value = line.partition("=")
            if not sep or name.strip() != prop_name:
                continue
            prop = value.strip()
            if prop.startswith('"') and prop.endswith('"'):
                prop = prop[1:-1]
            return prop
    return None


def get_prop(prop_name: str) -> str | None:
    """
    Get the value of a variable.

    The function follows the order:

    1. Check for .twohoprc in the current directory
    2. Recurse up the directory tree for .twohoprc
    3. Check environment variables
    4. Check ~/.twohoprc

    :param prop_name: The name of the property to retrieve.
    :returns: The value of the property if found, otherwise None.
    """
    cwd = Path.cwd()
    if prop := _get_from_file(cwd, prop_name):
        return prop

    for path in cwd.parents:
        if prop := _get_from_file(path, prop_name):
            return prop

    prop = os.getenv(prop_name, None)
    if prop:
        _LOGGER.info(f"Using value {prop_name} from environment")
        return prop

    prop = _get_from_file(Path.home(), prop_name)

    return prop or None


def get_log_level(level: str | None = None) -> str:
    """
    Resolve the log level: argument, then TWOHOP_LOG, then "warning".

    :raises InvalidConfig: If the level is not one of error/warning/info/debug.
    """
    level = (level or get_prop("TWOHOP_LOG") or "warning").lower()
    if level not in _LOG_LEVELS:
        raise InvalidConfig(
            f"Invalid log level {level!r}, expected one of {', '.join(_LOG_LEVELS)}"
        )
    return level


def get_workers(workers: int | None = None) -> int:
    """
    Resolve the worker count: argument, then TWOHOP_WORKERS, then 1.

    :raises InvalidConfig: If the value is not a positive integer.
    """
    if workers is None:
        raw = get_prop("TWOHOP_WORKERS")
        try:
            workers = int(raw) if raw else 1
        except ValueError:
            raise InvalidConfig(f"TWOHOP_WORKERS must be an integer, got {raw!r}")
    if workers < 1:
        raise InvalidConfig(f"Worker count must be positive, got {workers}")
    return workers


def get_out_dir(out: str | Path | None = None) -> Path:
    """Resolve the output directory: argument, then TWOHOP_OUT, then ./out."""
    return Path(out or get_prop("TWOHOP_OUT") or "out")


def load_json_config(path: str | Path) -> dict[str, Any]:
    """
    Read a JSON run configuration document.

    :param path: Path of the document.
    :returns: The parsed top-level object.
    :raises CorruptFile: If the file is unreadable or not a JSON object.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CorruptFile(f"Cannot read configuration {path}: {exc}") from None
    if not isinstance(data, dict):
        raise CorruptFile(f"Configuration {path} must hold a JSON object")
    return data


def config_from_dict(cls: type[TConfig], data: dict[str, Any] | None) -> TConfig:
    """
    Build a NamedTuple config from a dict, rejecting unknown keys.

    :param cls: The NamedTuple class.
    :param data: Field values; missing fields take the class defaults.
    :returns: The config instance.
    :raises InvalidConfig: On unknown keys.
    """
    data = dict(data or {})
    unknown = sorted(set(data) - set(cls._fields))
    if unknown:
        raise InvalidConfig(
            f"Unknown {cls.__name__} fields: {', '.join(unknown)}"
        )
    return cls(**data)
