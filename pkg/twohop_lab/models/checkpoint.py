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
Binary checkpoints. All integers are unsigned 32-bit little-endian, all
floats 64-bit little-endian, arrays row-major.

Emb-MLP:      magic "THLB", version, |V_in|, |V_out|, d_m, E, W_proj
Transformer:  magic "THTF", version, config length, config JSON, tensor count,
              then per tensor: name length, name, ndim, dims, values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import CorruptFile

EMBMLP_MAGIC = b"THLB"
TRANSFORMER_MAGIC = b"THTF"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CorruptFile(f"Checkpoint {self.path} is truncated")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * _F64.itemsize)
        return np.frombuffer(raw, dtype=_F64).astype(np.float64).reshape(shape)

    def header(self, magic: bytes) -> None:
        if self.take(len(magic)) != magic:
            raise CorruptFile(f"{self.path} is not a {magic.decode()} checkpoint")
        version = self.u32()
        if version != FORMAT_VERSION:
            raise CorruptFile(
                f"Unsupported checkpoint version {version} in {self.path}"
            )

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise CorruptFile(f"Trailing bytes in checkpoint {self.path}")


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise CorruptFile(f"Cannot read checkpoint {path}: {exc}") from None


def _floats(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=_F64).tobytes()


def save_embmlp(path: Path | str, E: np.ndarray, W_proj: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_in, d_m = E.shape
    n_out = W_proj.shape[1]
    with path.open("wb") as fh:
        fh.write(EMBMLP_MAGIC)
        for value in (FORMAT_VERSION, n_in, n_out, d_m):
            fh.write(_U32.pack(value))
        fh.write(_floats(E))
        fh.write(_floats(W_proj))
    return path


def load_embmlp(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """
    :returns: (E, W_proj).
    :raises CorruptFile: On a wrong magic, version or size.
    """
    path = Path(path)
    reader = _Reader(_read_bytes(path), path)
    reader.header(EMBMLP_MAGIC)
    n_in, n_out, d_m = reader.u32(), reader.u32(), reader.u32()
    E = reader.floats((n_in, d_m))
    W_proj = reader.floats((d_m, n_out))
    reader.finish()
    return E, W_proj


def save_tensors(
    path: Path | str, config: dict, tensors: dict[str, np.ndarray]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(TRANSFORMER_MAGIC)
        fh.write(_U32.pack(FORMAT_VERSION))
        fh.write(_U32.pack(len(config_bytes)))
        fh.write(config_bytes)
        fh.write(_U32.pack(len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(array.ndim))
            for dim in array.shape:
                fh.write(_U32.pack(dim))
            fh.write(_floats(array))
    return path


def load_tensors(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    """
    :returns: (config dict, ordered named tensors).
    :raises CorruptFile: On a wrong magic, version or size.
    """
    path = Path(path)
    reader = _Reader(_read_bytes(path), path)
    reader.header(TRANSFORMER_MAGIC)
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
        tensors = {}
        for _ in range(reader.u32()):
            name = reader.take(reader.u32()).decode("utf-8")
            shape = tuple(reader.u32() for _ in range(reader.u32()))
            tensors[name] = reader.floats(shape)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptFile(f"Malformed checkpoint {path}: {exc}") from None
    reader.finish()
    return config, tensors


def checkpoint_kind(path: Path | str) -> str:
    """
    :returns: "embmlp" or "transformer", from the file's magic.
    :raises CorruptFile: If the file is unreadable or carries neither magic.
    """
    path = Path(path)
    magic = _read_bytes(path)[: len(EMBMLP_MAGIC)]
    if magic == EMBMLP_MAGIC:
        return "embmlp"
    if magic == TRANSFORMER_MAGIC:
        return "transformer"
    raise CorruptFile(f"{path} is not a checkpoint")
