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
The reduced nuclear-norm programs as smooth nonlinear programs::

    min F(x)  s.t.  g_i(x) >= 0,  h_j(x) = 0

each with analytic gradients and constraint Jacobians.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Union

import numpy as np

from ..exceptions import InvalidConfig

from .restricted import (
    ID_VARIABLES,
    ReducedPointId,
    ReducedPointNoId,
    check_dimension,
    id_inequalities,
    objective_noid,
    sample_feasible_id,
)

_FLOOR = 1e-12

Point = Union[ReducedPointId, ReducedPointNoId]


class Program(ABC):
    name: str
    variables: tuple[str, ...]

    def __init__(self, n: int) -> None:
        check_dimension(n)
        self.n = n

    def __repr__(self):
        return f"{self.__class__.__name__}(n={self.n})"

    @abstractmethod
    def objective(self, x: np.ndarray) -> float:
        pass

    @abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def inequalities(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def inequality_jacobian(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def equalities(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def equality_jacobian(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def start(self, rng: np.random.Generator) -> np.ndarray:
        """A feasible starting vector."""

    @abstractmethod
    def point(self, x: np.ndarray) -> Point:
        pass

    def reported_objective(self, x: np.ndarray) -> float:
        """Objective value as reported; differs from :meth:`objective` when smoothed."""
        return self.objective(x)

    def feasibility(self, x: np.ndarray) -> float:
        """Largest constraint violation."""
        violation = np.maximum(0.0, -self.inequalities(x))
        worst = violation.max(initial=0.0)
        eq = self.equalities(x)
        if eq.size:
            worst = max(worst, np.abs(eq).max())
        return float(worst)


class IdProgram(Program):
    """
    With identity supervision, in the slack variable t >= |a1 d1 - b1 c1|::

        F = (n-1) sqrt(a1^2 + b1^2 + c1^2 + d1^2 + 2t)
            + sqrt(2 ((a1 + n a2)^2 + (b1 + n b2)^2 + n e^2 + n f^2))
    """

    name = "id"
    variables = ID_VARIABLES

    def objective(self, x):
        a1, a2, b1, b2, c1, c2, d1, d2, e, f, t = x
        n = self.n
        m1 = a1**2 + b1**2 + c1**2 + d1**2 + 2 * t
        m2 = (a1 + n * a2) ** 2 + (b1 + n * b2) ** 2 + n * e**2 + n * f**2
        return float((n - 1) * np.sqrt(max(m1, _FLOOR)) + np.sqrt(2 * max(m2, _FLOOR)))

    def gradient(self, x):
        a1, a2, b1, b2, c1, c2, d1, d2, e, f, t = x
        n = self.n
        m1 = max(a1**2 + b1**2 + c1**2 + d1**2 + 2 * t, _FLOOR)
        m2 = max((a1 + n * a2) ** 2 + (b1 + n * b2) ** 2 + n * e**2 + n * f**2, _FLOOR)
        k1 = (n - 1) / (2 * np.sqrt(m1))
        k2 = 1.0 / np.sqrt(2 * m2)
        xa, xb = a1 + n * a2, b1 + n * b2
        return np.array(
            [
                k1 * 2 * a1 + k2 * 2 * xa,
                k2 * 2 * n * xa,
                k1 * 2 * b1 + k2 * 2 * xb,
                k2 * 2 * n * xb,
                k1 * 2 * c1,
                0.0,
                k1 * 2 * d1,
                0.0,
                k2 * 2 * n * e,
                k2 * 2 * n * f,
                k1 * 2,
            ]
        )

    def inequalities(self, x):
        return id_inequalities(self.point(x))

    def inequality_jacobian(self, x):
        a1, a2, b1, b2, c1, c2, d1, d2, e, f, t = x
        #              a1   a2   b1   b2   c1   c2   d1   d2   e    f    t
        return np.array(
            [
                [1.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
                [1.0, 1, 0, 0, -1, -1, 0, 0, 2, 0, 0],
                [0.0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0],
                [0.0, 0, 1, 1, 0, 0, -1, -1, 0, 0, 0],
                [0.0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0],
                [0.0, 0, -1, -1, 0, 0, 1, 1, 0, -2, 0],
                [-d1, 0, c1, 0, b1, 0, -a1, 0, 0, 0, 1],
                [d1, 0, -c1, 0, -b1, 0, a1, 0, 0, 0, 1],
                [0.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1],
            ]
        )

    def equalities(self, x):
        a1, a2, b1, b2, c1, c2, d1, d2 = x[:8]
        n = self.n
        return np.array([a1 + c1 + n * (a2 + c2), b1 + d1 + n * (b2 + d2)])

    def equality_jacobian(self, x):
        n = float(self.n)
        return np.array(
            [
                [1.0, n, 0, 0, 1, n, 0, 0, 0, 0, 0],
                [0.0, 0, 1, n, 0, 0, 1, n, 0, 0, 0],
            ]
        )

    def start(self, rng):
        return sample_feasible_id(self.n, rng).vector()

    def point(self, x) -> ReducedPointId:
        return ReducedPointId.from_vector(self.n, x)


class NoIdProgram(Program):
    """
    Without identity supervision. The term ``sqrt(2(a1^2+b1^2) + 2|a1^2-b1^2|)``
    equals ``2 max(|a1|, |b1|)``, which becomes the slack s with
    ``s >= a1, s >= b1, s >= -b1``; the norm term is smoothed by ``smoothing``,
    which leaves its minimizers in place::

        F = 2(n-1) s + 2 sqrt((a1 + n a2)^2 + n alpha^2 + smoothing^2)
    """

    name = "noid"
    variables = ("a1", "a2", "b1", "b2", "alpha", "s")

    def __init__(self, n: int, smoothing: float = 1e-6) -> None:
        super().__init__(n)
        self.smoothing = smoothing

    def _norm(self, x) -> float:
        a1, a2, b1, b2, alpha, s = x
        n = self.n
        return float(np.sqrt((a1 + n * a2) ** 2 + n * alpha**2 + self.smoothing**2))

    def objective(self, x):
        s = x[5]
        return float(2 * (self.n - 1) * s + 2 * self._norm(x))

    def gradient(self, x):
        a1, a2, b1, b2, alpha, s = x
        n = self.n
        norm = max(self._norm(x), _FLOOR)
        xa = a1 + n * a2
        return np.array(
            [
                2 * xa / norm,
                2 * n * xa / norm,
                0.0,
                0.0,
                2 * n * alpha / norm,
                2.0 * (n - 1),
            ]
        )

    def inequalities(self, x):
        a1, a2, b1, b2, alpha, s = x
        return np.array(
            [a1 - 1, a1 + a2 + 2 * alpha - b1 - b2 - 1, s - a1, s - b1, s + b1]
        )

    def inequality_jacobian(self, x):
        #              a1   a2   b1   b2  alpha  s
        return np.array(
            [
                [1.0, 0, 0, 0, 0, 0],
                [1.0, 1, -1, -1, 2, 0],
                [-1.0, 0, 0, 0, 0, 1],
                [0.0, 0, -1, 0, 0, 1],
                [0.0, 0, 1, 0, 0, 1],
            ]
        )

    def equalities(self, x):
        a1, a2, b1, b2 = x[:4]
        return np.array([a1 + b1 + self.n * (a2 + b2)])

    def equality_jacobian(self, x):
        n = float(self.n)
        return np.array([[1.0, n, 1, n, 0, 0]])

    def start(self, rng):
        n = self.n
        a1 = 1.0 + float(rng.exponential(0.5))
        a2 = float(rng.normal(0.0, 0.5))
        b1 = float(rng.uniform(-1.5, 1.5))
        b2 = -(a1 + b1) / n - a2
        alpha = (b1 + b2 + 1.0 - a1 - a2) / 2 + float(rng.exponential(0.5))
        s = max(a1, abs(b1)) + float(rng.exponential(0.5))
        return np.array([a1, a2, b1, b2, alpha, s])

    def point(self, x) -> ReducedPointNoId:
        return ReducedPointNoId.from_vector(self.n, x)

    def reported_objective(self, x):
        return objective_noid(self.point(x))


def make_program(name: str, n: int, smoothing: float = 1e-6) -> Program:
    if name == "id":
        return IdProgram(n)
    if name == "noid":
        return NoIdProgram(n, smoothing)
    raise InvalidConfig(f"Unknown program {name!r}, expected 'id' or 'noid'")
