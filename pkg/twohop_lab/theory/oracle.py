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
Nuclear-norm margin program over the full logit matrix, solved without the
restricted-form parametrization::

    min ||W||_*  s.t.  s(x, y, y') >= 1 for every training row and competitor

by primal-dual hybrid gradient steps: singular-value soft-thresholding on W
and a projected ascent on the (nonpositive) constraint multipliers.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from ..exceptions import DidNotConverge, InvalidConfig, InvalidDimension, ShapeMismatch
from ..models.taskgen import DatasetSpec, generate
from ..utils import timed
from .restricted import check_dimension

_LOGGER = logging.getLogger(__name__)

MAX_ORACLE_N = 8


class OracleConfig(NamedTuple):
    max_iter: int = 200_000
    check_every: int = 100
    violation_tol: float = 1e-6
    objective_tol: float = 1e-8
    step_scale: float = 0.99

    def validate(self) -> OracleConfig:
        if self.max_iter < 1 or self.check_every < 1:
            raise InvalidConfig("max_iter and check_every must be positive")
        if not 0 < self.step_scale < 1:
            raise InvalidConfig(f"step_scale must lie in (0, 1): {self.step_scale}")
        return self


class OracleResult(NamedTuple):
    W: np.ndarray
    objective: float
    iterations: int
    min_margin: float


def nuclear_norm(W: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(W, compute_uv=False)))


def prox_nuclear(V: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal map of ``threshold * ||.||_*``: soft-threshold the singular values."""
    U, s, Vt = np.linalg.svd(V, full_matrices=False)
    return (U * np.maximum(0.0, s - threshold)) @ Vt


def margin_operator(n: int, with_identity: bool) -> np.ndarray:
    """
    Matrix A with one row per (training row, competitor) so that
    ``A @ W.ravel()`` lists every training margin of W.
    """
    check_dimension(n)
    dataset = generate(
        DatasetSpec(n_entities=n, complexity=1, include_identity=with_identity)
    )
    layout = dataset.layout
    rows, cols = layout.in_index(), layout.out_index()
    shape = (len(layout.in_vocab), len(layout.out_vocab))
    operator = []
    for example in dataset.train:
        inputs = [rows[token] for token in example.tokens]
        target = cols[example.target]
        for competitor in range(shape[1]):
            if competitor == target:
                continue
            row = np.zeros(shape)
            row[inputs, target] += 1.0
            row[inputs, competitor] -= 1.0
            operator.append(row.ravel())
    return np.array(operator)


def training_margins(W: np.ndarray, n: int, with_identity: bool) -> np.ndarray:
    """
    Every training margin of a full (2n+2) x 2n logit matrix.

    :raises ShapeMismatch: If W has the wrong shape.
    """
    check_dimension(n)
    if W.shape != (2 * n + 2, 2 * n):
        raise ShapeMismatch(f"Expected a {(2 * n + 2, 2 * n)} matrix, got {W.shape}")
    return margin_operator(n, with_identity) @ W.ravel()


@timed
def full_matrix_oracle(
    n: int, with_identity: bool, config: OracleConfig = OracleConfig()
) -> OracleResult:
    """
    Solve the margin program directly over the full matrix.

    The returned objective is ``0.5 * ||W||_*^2``. The final iterate is
    rescaled so that its smallest training margin is at least 1.

    :param n: Instance size, 2..8.
    :param with_identity: Include the zero-hop rows in the constraints.
    :param config: Iteration budget and tolerances.
    :raises InvalidDimension: If n is outside 2..8.
    :raises DidNotConverge: If the budget runs out before the tolerances hold.
    """
    config.validate()
    check_dimension(n)
    if n > MAX_ORACLE_N:
        raise InvalidDimension(f"The full-matrix oracle supports n <= {MAX_ORACLE_N}")
    A = margin_operator(n, with_identity)
    shape = (2 * n + 2, 2 * n)
    step = config.step_scale / np.linalg.norm(A, 2)

    x = np.zeros(A.shape[1])
    x_bar = x.copy()
    y = np.zeros(A.shape[0])
    previous = None
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        y = np.minimum(0.0, y + step * (A @ x_bar) - step)
        x_new = prox_nuclear((x - step * (A.T @ y)).reshape(shape), step).ravel()
        x_bar = 2 * x_new - x
        x = x_new
        if iteration % config.check_every:
            continue
        objective = nuclear_norm(x.reshape(shape))
        violation = max(0.0, 1.0 - float((A @ x).min()))
        if previous is not None:
            change = abs(objective - previous) / max(objective, 1e-12)
            if violation <= config.violation_tol and change <= config.objective_tol:
                converged = True
                break
        previous = objective
        if iteration % (100 * config.check_every) == 0:
            _LOGGER.debug(
                f"oracle n={n} iteration {iteration}: |W|_*={objective:.8f} "
                f"violation={violation:.2e}"
            )

    margins = A @ x
    smallest = float(margins.min())
    if not converged or smallest <= 0:
        raise DidNotConverge(
            f"Full-matrix oracle (n={n}) stopped after {iteration} iterations "
            f"with smallest margin {smallest:.3e}"
        )
    W = x.reshape(shape) / min(1.0, smallest)
    objective = 0.5 * nuclear_norm(W) ** 2
    _LOGGER.info(
        f"Full-matrix oracle n={n} identity={with_identity}: objective "
        f"{objective:.6f} after {iteration} iterations"
    )
    return OracleResult(W, objective, iteration, float((A @ W.ravel()).min()))
