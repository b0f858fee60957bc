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

from __future__ import annotations

import json
import logging
import time
from functools import wraps
from pathlib import Path
from typing import Any, Callable, TypeVar, cast

import numpy as np

from .exceptions import Diverged, InvalidConfig

_LOGGER = logging.getLogger(__name__)

TCallable = TypeVar("TCallable", bound=Callable)


def stable_json(obj: Any) -> str:
    """
    Serialize to JSON with sorted keys, fixed indentation and a trailing newline,
    so that equal objects always produce equal bytes.
    """
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_text(path: Path | str, text: str) -> Path:
    """
    Write text with Unix line endings, creating parent directories.

    :param path: Destination file.
    :param text: Content to write.
    :returns: The destination as a Path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; seeds are unsigned 64-bit integers."""
    if seed < 0 or seed >= 2**64:
        raise InvalidConfig(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.default_rng(seed)


def argmax_lowest(values: np.ndarray) -> int:
    """Index of the maximum; exact ties go to the lowest index."""
    # np.argmax already returns the first occurrence
    return int(np.argmax(values))


def check_finite(loss: float, step: int) -> None:
    """
    :raises Diverged: If the loss is NaN or infinite.
    """
    if not np.isfinite(loss):
        raise Diverged(f"Loss became non-finite ({loss}) at step {step}")


def timed(func: TCallable) -> TCallable:
    """A decorator that logs the wall time of the wrapped call at debug level."""

    @wraps(func)
    def wrapper_timed(*args, **kwargs):
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            elapsed = (time.perf_counter() - start) * 1000.0
            _LOGGER.debug(f"{func.__qualname__} took {elapsed:.1f} ms")

    return cast(TCallable, wrapper_timed)
