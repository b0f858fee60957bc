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
"""Training configuration, traces and optimizers shared by both models."""
from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..exceptions import CorruptFile, InvalidConfig
from ..utils import write_text

_LOGGER = logging.getLogger(__name__)

STANDARD_SIGMA = 0.02
_INITS = ("standard", "small")
_OPTIMIZERS = ("gd", "adam")
TRACE_HEADER = ("step", "loss", "train_acc", "ood_acc", "min_ood_margin")


class TrainConfig(NamedTuple):
    """
    Optimization settings for either model.

    ``init`` is "standard" (sigma = 0.02) or "small" (sigma = d1 ** -gamma,
    with d1 the input dimension of each matrix). Training stops at
    ``max_steps`` or, once the train set is fit with loss <= ``stop_loss``,
    after ``margin_phase`` times as many further steps.
    """

    init: str = "standard"
    gamma: float = 1.0
    learning_rate: float = 0.5
    weight_decay: float = 0.0
    max_steps: int = 50_000
    stop_loss: float = 1e-3
    seed: int = 0
    optimizer: str = "gd"
    log_every: int = 100
    margin_phase: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_transformer(cls, **overrides) -> TrainConfig:
        """
        Defaults for the transformer: adaptive moments at lr 1e-3 with a light
        L2 term, so tensors the train set never reaches (the third position)
        decay instead of keeping their random init.
        """
        values = dict(
            learning_rate=1e-3,
            optimizer="adam",
            weight_decay=1e-4,
            max_steps=10_000,
            log_every=50,
        )
        values.update(overrides)
        return cls(**values)

    def validate(self) -> TrainConfig:
        if self.init not in _INITS:
            raise InvalidConfig(f"init must be one of {_INITS}, got {self.init!r}")
        if self.init == "small" and not self.gamma > 0.5:
            raise InvalidConfig(f"Small init needs gamma > 0.5, got {self.gamma}")
        if self.optimizer not in _OPTIMIZERS:
            raise InvalidConfig(
                f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}"
            )
        if not self.learning_rate > 0:
            raise InvalidConfig(f"learning_rate must be positive: {self.learning_rate}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0: {self.weight_decay}")
        if self.max_steps < 0:
            raise InvalidConfig(f"max_steps must be >= 0: {self.max_steps}")
        if not self.stop_loss > 0:
            raise InvalidConfig(f"stop_loss must be positive: {self.stop_loss}")
        if self.log_every < 1:
            raise InvalidConfig(f"log_every must be positive: {self.log_every}")
        return self

    def sigma(self, d_in: int) -> float:
        """Standard deviation for a matrix whose input dimension is ``d_in``."""
        if self.init == "standard":
            return STANDARD_SIGMA
        return float(d_in) ** (-self.gamma)


class TraceRow(NamedTuple):
    step: int
    loss: float
    train_acc: float
    ood_acc: float
    min_ood_margin: float
    alignment: float | None = None


class TrainTrace:
    """Logged training history; steps are strictly increasing."""

    def __init__(self, rows: list[TraceRow] | None = None) -> None:
        self.rows: list[TraceRow] = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other):
        return isinstance(other, TrainTrace) and self.rows == other.rows

    def __repr__(self):
        return f"{self.__class__.__name__}({len(self.rows)} rows)"

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(
                f"Trace steps must increase: {row.step} after {self.rows[-1].step}"
            )
        self.rows.append(row)

    @property
    def final(self) -> TraceRow | None:
        return self.rows[-1] if self.rows else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for row in self.rows:
            writer.writerow([row.step] + [repr(float(v)) for v in row[1:5]])
        return buf.getvalue()

    def alignment_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("step", "alignment", "ood_acc"))
        for row in self.rows:
            if row.alignment is not None:
                writer.writerow(
                    [row.step, repr(float(row.alignment)), repr(float(row.ood_acc))]
                )
        return buf.getvalue()


def write_trace(trace: TrainTrace, path: Path | str) -> Path:
    return write_text(path, trace.to_csv())


def read_trace(path: Path | str) -> TrainTrace:
    """
    :raises CorruptFile: If the header or a row is malformed.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != TRACE_HEADER:
                raise CorruptFile(f"Unexpected trace header in {path}: {header}")
            rows = [
                TraceRow(int(r[0]), *(float(v) for v in r[1:5])) for r in reader
            ]
    except (OSError, StopIteration, ValueError, IndexError) as exc:
        raise CorruptFile(f"Cannot read trace {path}: {exc}") from None
    return TrainTrace(rows)


class Adam:
    """Adaptive-moment update over a dict of named arrays, in place."""

    def __init__(
        self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            m = self._m.setdefault(name, np.zeros_like(grad))
            v = self._v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[name] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class GradientDescent:
    """Plain fixed-step update, in place."""

    def __init__(self, lr: float) -> None:
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            params[name] -= self.lr * grad


def make_optimizer(config: TrainConfig) -> Adam | GradientDescent:
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    return GradientDescent(config.learning_rate)


class StopRule:
    """
    Stop at the step budget, or ``margin_phase`` times the fitting time after the
    train set is first fit with loss at most ``stop_loss``.
    """

    def __init__(self, config: TrainConfig) -> None:
        self.max_steps = config.max_steps
        self.stop_loss = config.stop_loss
        self.margin_phase = config.margin_phase
        self.deadline = config.max_steps
        self.fit_step: int | None = None

    def done(self, step: int, loss: float, train_acc: float) -> bool:
        if self.fit_step is None and train_acc == 1.0 and loss <= self.stop_loss:
            self.fit_step = step
            self.deadline = min(self.max_steps, step + self.margin_phase * step)
            _LOGGER.info(
                f"Train set fit at step {step} (loss {loss:.3g}), "
                f"continuing to step {self.deadline}"
            )
        return step >= self.deadline
