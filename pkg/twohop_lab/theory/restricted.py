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
Restricted-form logit matrices and their closed-form nuclear norms.

Matrices are indexed with input tokens as rows, in the order (subjects,
bridges, r1, r2), and output tokens as columns, in the order (bridges,
objects), matching the Emb-MLP vocabularies of a C = 1 dataset.

With identity supervision the blocks are::

                  bridges        objects
    subjects   a1 I + a2 E    c1 I + c2 E
    bridges    b1 I + b2 E    d1 I + d2 E
    r1         e              g
    r2         f              h

and without it the symmetric form swaps (a, b) between the column blocks
and uses (alpha, beta) for the relation rows.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from ..exceptions import (
    InfeasiblePoint,
    InvalidDimension,
    NegativeRadicand,
    ShapeMismatch,
)
from ..models.margin import MarginReport, margin_report, row_sum_logits
from ..models.taskgen import (
    DatasetSpec,
    Example,
    ExampleKind,
    VocabLayout,
    build_layout,
)

_LOGGER = logging.getLogger(__name__)

EQUALITY_TOL = 1e-8
FEASIBILITY_TOL = 1e-7
_RADICAND_CLAMP = 1e-12
_RADICAND_ERROR = 1e-9

ID_VARIABLES = ("a1", "a2", "b1", "b2", "c1", "c2", "d1", "d2", "e", "f", "t")
NOID_VARIABLES = ("a1", "a2", "b1", "b2", "alpha")


def check_dimension(n: int) -> None:
    if n < 2:
        raise InvalidDimension(f"Instance size n must be at least 2, got {n}")


class ReducedPointId(NamedTuple):
    """Restricted-form parameters with identity supervision, plus the slack t."""

    n: int
    a1: float = 0.0
    a2: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    d1: float = 0.0
    d2: float = 0.0
    e: float = 0.0
    f: float = 0.0
    g: float = 0.0
    h: float = 0.0
    t: float = 0.0

    @property
    def u(self) -> float:
        """The determinant term a1 d1 - b1 c1."""
        return self.a1 * self.d1 - self.b1 * self.c1

    def vector(self) -> np.ndarray:
        """Program variables (a1, a2, b1, b2, c1, c2, d1, d2, e, f, t)."""
        return np.array([getattr(self, name) for name in ID_VARIABLES], dtype=float)

    @classmethod
    def from_vector(cls, n: int, x: np.ndarray) -> ReducedPointId:
        """Inverse of :meth:`vector`; g and h follow from g = -e, h = -f."""
        values = dict(zip(ID_VARIABLES, (float(v) for v in x)))
        return cls(n=n, g=-values["e"], h=-values["f"], **values)

    def scaled(self, factor: float) -> ReducedPointId:
        """Scale the coefficients by factor and the slack t by factor**2."""
        values = {name: factor * getattr(self, name) for name in self._fields[1:-1]}
        return self._replace(t=factor**2 * self.t, **values)

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in self._fields[1:]}


class ReducedPointNoId(NamedTuple):
    """Symmetric restricted-form parameters without identity supervision."""

    n: int
    a1: float = 0.0
    a2: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    alpha: float = 0.0

    @property
    def beta(self) -> float:
        # row-sum symmetry of the relation rows
        return -self.alpha

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in NOID_VARIABLES], dtype=float)

    @classmethod
    def from_vector(cls, n: int, x: np.ndarray) -> ReducedPointNoId:
        return cls(n, *(float(v) for v in x[: len(NOID_VARIABLES)]))

    def scaled(self, factor: float) -> ReducedPointNoId:
        return self._replace(
            **{name: factor * getattr(self, name) for name in NOID_VARIABLES}
        )

    def as_dict(self) -> dict[str, float]:
        values = {name: float(getattr(self, name)) for name in NOID_VARIABLES}
        values["beta"] = float(self.beta)
        return values


def layout_for(n: int) -> VocabLayout:
    """Token layout of the C = 1 task with n entities."""
    check_dimension(n)
    return build_layout(DatasetSpec(n_entities=n, complexity=1))


def _block(diag: float, off: float, n: int) -> np.ndarray:
    return diag * np.eye(n) + off * np.ones((n, n))


def assemble_blocks(n: int, ab, ac, bb, bc, r1, r2) -> np.ndarray:
    """
    Matrix from (diagonal, all-ones) pairs per entity block and (bridge, object)
    values per relation row.
    """
    W = np.zeros((2 * n + 2, 2 * n))
    W[:n, :n] = _block(*ab, n)
    W[:n, n:] = _block(*ac, n)
    W[n : 2 * n, :n] = _block(*bb, n)
    W[n : 2 * n, n:] = _block(*bc, n)
    W[2 * n, :n], W[2 * n, n:] = r1
    W[2 * n + 1, :n], W[2 * n + 1, n:] = r2
    return W


def assemble_w(point: ReducedPointId) -> np.ndarray:
    """
    Dense (2n+2) x 2n logit matrix of a restricted-form point.

    :raises InvalidDimension: If n < 2.
    """
    check_dimension(point.n)
    p = point
    return assemble_blocks(
        p.n,
        (p.a1, p.a2),
        (p.c1, p.c2),
        (p.b1, p.b2),
        (p.d1, p.d2),
        (p.e, p.g),
        (p.f, p.h),
    )


def assemble_w_noid(point: ReducedPointNoId) -> np.ndarray:
    """
    Dense (2n+2) x 2n logit matrix of the symmetric form.

    :raises InvalidDimension: If n < 2.
    """
    check_dimension(point.n)
    p = point
    return assemble_blocks(
        p.n,
        (p.a1, p.a2),
        (p.b1, p.b2),
        (p.b1, p.b2),
        (p.a1, p.a2),
        (p.alpha, p.beta),
        (p.beta, p.alpha),
    )


def gram_coefficients(point: ReducedPointId) -> dict[str, float]:
    """Block coefficients of the 2n x 2n Gram matrix of the output columns."""
    p, n = point, point.n
    return {
        "A1": p.a1**2 + p.b1**2,
        "A2": 2 * p.a1 * p.a2 + n * p.a2**2 + 2 * p.b1 * p.b2 + n * p.b2**2
        + p.e**2 + p.f**2,
        "D1": p.c1**2 + p.d1**2,
        "D2": 2 * p.c1 * p.c2 + n * p.c2**2 + 2 * p.d1 * p.d2 + n * p.d2**2
        + p.g**2 + p.h**2,
        "B1": p.a1 * p.c1 + p.b1 * p.d1,
        "B2": p.a1 * p.c2 + p.a2 * p.c1 + n * p.a2 * p.c2
        + p.b1 * p.d2 + p.b2 * p.d1 + n * p.b2 * p.d2
        + p.e * p.g + p.f * p.h,
    }


def nuclear_norm_closed(point: ReducedPointId) -> float:
    """
    Nuclear norm of :func:`assemble_w` without an SVD.

    The Gram matrix splits into n - 1 copies of a 2 x 2 block on the
    complement of the all-ones direction and one 2 x 2 block on it; the sum of
    singular values of each is ``sqrt(trace + 2 sqrt(det))``.

    :raises InvalidDimension: If n < 2.
    :raises NegativeRadicand: If the determinant of the all-ones block
        computed from the coefficients is clearly negative.
    """
    check_dimension(point.n)
    p, n = point, point.n
    coef = gram_coefficients(point)
    A = coef["A1"] + n * coef["A2"]
    D = coef["D1"] + n * coef["D2"]
    B = coef["B1"] + n * coef["B2"]

    radicand = A * D - B**2
    scale = max(1.0, A * D)
    if radicand < -_RADICAND_ERROR * scale:
        raise NegativeRadicand(
            f"Radicand {radicand:.3e} is negative; the point is inconsistent"
        )
    if radicand < -_RADICAND_CLAMP * scale:
        _LOGGER.warning(f"Clamping radicand {radicand:.3e} to zero")

    # A*D - B^2 cancels badly near the symmetric solutions, so take the
    # determinant from the Lagrange identity on the two all-ones projections.
    root_n = np.sqrt(n)
    left = np.array([p.a1 + n * p.a2, p.b1 + n * p.b2, root_n * p.e, root_n * p.f])
    right = np.array([p.c1 + n * p.c2, p.d1 + n * p.d2, root_n * p.g, root_n * p.h])
    cross = np.outer(left, right)
    det = float(np.sum(np.triu(cross - cross.T, k=1) ** 2))

    first = (n - 1) * np.sqrt(coef["A1"] + coef["D1"] + 2 * abs(p.u))
    second = np.sqrt(max(A + D + 2 * np.sqrt(det), 0.0))
    return float(first + second)


def id_equalities(point: ReducedPointId) -> np.ndarray:
    """Residuals of h1, h2 and the relation-row symmetries e + g, f + h."""
    p, n = point, point.n
    return np.array(
        [
            p.a1 + p.c1 + n * (p.a2 + p.c2),
            p.b1 + p.d1 + n * (p.b2 + p.d2),
            p.e + p.g,
            p.f + p.h,
        ]
    )


def id_inequalities(point: ReducedPointId) -> np.ndarray:
    """Inequalities of the program with g and h substituted; feasible when all >= 0."""
    p = point
    u = p.u
    return np.array(
        [
            p.a1 - 1,
            p.a1 + p.a2 + 2 * p.e - p.c1 - p.c2 - 1,
            p.b1 - 1,
            p.b1 + p.b2 - p.d1 - p.d2 - 1,
            p.d1 - 1,
            p.d1 + p.d2 - p.b1 - p.b2 - 2 * p.f - 1,
            p.t - u,
            p.t + u,
            p.t,
        ]
    )


def template_constraints(point: ReducedPointId) -> np.ndarray:
    """
    Residuals of the restricted-form constraints as the training margins
    state them, before g = -e and h = -f are substituted; feasible when all
    are >= 0.
    """
    p = point
    return np.array(
        [
            p.a1 - 1,
            p.d1 - 1,
            p.a1 + p.a2 + p.e - p.c1 - p.c2 - p.g - 1,
            p.d1 + p.d2 + p.h - p.b1 - p.b2 - p.f - 1,
            p.b1 - 1,
            p.b1 + p.b2 - p.d1 - p.d2 - 1,
        ]
    )


def feasibility_residual_id(point: ReducedPointId) -> float:
    violation = np.maximum(0.0, -id_inequalities(point))
    return float(max(violation.max(), np.abs(id_equalities(point)).max()))


def noid_equalities(point: ReducedPointNoId) -> np.ndarray:
    p, n = point, point.n
    return np.array([p.a1 + p.b1 + n * (p.a2 + p.b2)])


def noid_inequalities(point: ReducedPointNoId) -> np.ndarray:
    p = point
    return np.array(
        [p.a1 - 1, p.a1 + p.a2 + p.alpha - p.b1 - p.b2 - p.beta - 1]
    )


def feasibility_residual_noid(point: ReducedPointNoId) -> float:
    violation = np.maximum(0.0, -noid_inequalities(point))
    return float(max(violation.max(), np.abs(noid_equalities(point)).max()))


def objective_id(point: ReducedPointId) -> float:
    """
    ``(n-1) sqrt(M1) + sqrt(2 M2)`` with ``M1 = a1^2+b1^2+c1^2+d1^2+2t`` and
    ``M2 = (a1+n a2)^2 + (b1+n b2)^2 + n e^2 + n f^2``.

    :raises InfeasiblePoint: If an equality constraint is off by more than 1e-8.
    """
    check_dimension(point.n)
    residual = np.abs(id_equalities(point)).max()
    if residual > EQUALITY_TOL:
        raise InfeasiblePoint(f"Equality constraints violated by {residual:.3e}")
    p, n = point, point.n
    m1 = p.a1**2 + p.b1**2 + p.c1**2 + p.d1**2 + 2 * p.t
    m2 = (p.a1 + n * p.a2) ** 2 + (p.b1 + n * p.b2) ** 2 + n * p.e**2 + n * p.f**2
    return float((n - 1) * np.sqrt(max(m1, 0.0)) + np.sqrt(2 * m2))


def objective_noid(point: ReducedPointNoId) -> float:
    """The failure-program objective with its absolute value intact."""
    check_dimension(point.n)
    p, n = point, point.n
    first = np.sqrt(2 * (p.a1**2 + p.b1**2) + 2 * abs(p.a1**2 - p.b1**2))
    second = np.sqrt((p.a1 + n * p.a2) ** 2 + n * p.alpha**2)
    return float((n - 1) * first + 2 * second)


def sample_feasible_id(n: int, rng: np.random.Generator) -> ReducedPointId:
    """
    Draw a random point that satisfies every constraint of the with-identity
    program, with t = |a1 d1 - b1 c1|.
    """
    check_dimension(n)

    def slack() -> float:
        return float(rng.exponential(0.5))

    a1, b1, d1 = (1.0 + slack() for _ in range(3))
    c1 = float(rng.normal(0.0, 1.0))
    a2 = float(rng.normal(0.0, 0.5))
    c2 = -(a1 + c1) / n - a2
    # b2 solves g4 after substituting d2 from h2
    b2 = (1.0 + d1 - b1 - (b1 + d1) / n) / 2 + slack()
    d2 = -(b1 + d1) / n - b2
    e = (1.0 + c1 + c2 - a1 - a2) / 2 + slack()
    f = (d1 + d2 - b1 - b2 - 1.0) / 2 - slack()
    point = ReducedPointId(
        n=n, a1=a1, a2=a2, b1=b1, b2=b2, c1=c1, c2=c2, d1=d1, d2=d2,
        e=e, f=f, g=-e, h=-f,
    )
    return point._replace(t=abs(point.u))


def ood_queries(layout: VocabLayout) -> list[Example]:
    return [
        Example((subject, layout.rel1[0], layout.rel2[0]), obj, ExampleKind.TWO_HOP)
        for subject, obj in zip(layout.subjects, layout.objects)
    ]


def _reports(
    layout: VocabLayout, gap_to_bridge_self: float, gap_to_bridge_other: float,
    gap_to_object_other: float,
) -> list[MarginReport]:
    reports = []
    for i, query in enumerate(ood_queries(layout)):
        gaps = {}
        for j, bridge in enumerate(layout.bridges):
            gaps[bridge] = gap_to_bridge_self if i == j else gap_to_bridge_other
        for j, obj in enumerate(layout.objects):
            if i != j:
                gaps[obj] = gap_to_object_other
        reports.append(MarginReport.from_gaps(query, gaps))
    return reports


def ood_margin_id(point: ReducedPointId) -> list[MarginReport]:
    """
    Closed-form gaps of every OOD query ``(a_i, r1, r2) -> c_i``.

    :raises InfeasiblePoint: If the point violates the constraints.
    """
    residual = feasibility_residual_id(point)
    if residual > FEASIBILITY_TOL:
        raise InfeasiblePoint(f"Point violates the constraints by {residual:.3e}")
    p = point
    to_other_bridge = p.c1 + p.c2 + p.g + p.h - p.a2 - p.e - p.f
    return _reports(
        layout_for(p.n),
        gap_to_bridge_self=to_other_bridge - p.a1,
        gap_to_bridge_other=to_other_bridge,
        gap_to_object_other=p.c1,
    )


def ood_margin_noid(point: ReducedPointNoId) -> list[MarginReport]:
    """
    Closed-form gaps of every OOD query under the symmetric form.

    :raises InfeasiblePoint: If the point violates the constraints.
    """
    residual = feasibility_residual_noid(point)
    if residual > FEASIBILITY_TOL:
        raise InfeasiblePoint(f"Point violates the constraints by {residual:.3e}")
    p = point
    return _reports(
        layout_for(p.n),
        gap_to_bridge_self=p.b1 + p.b2 - p.a1 - p.a2,
        gap_to_bridge_other=p.b1 + p.b2 - p.a2,
        gap_to_object_other=p.b1,
    )


def matrix_ood_margins(W: np.ndarray, n: int) -> list[MarginReport]:
    """OOD margins of an arbitrary (2n+2) x 2n matrix, from its row sums."""
    layout = layout_for(n)
    if W.shape != (2 * n + 2, 2 * n):
        raise ShapeMismatch(f"Expected a {(2 * n + 2, 2 * n)} matrix, got {W.shape}")
    return [
        margin_report(
            query, row_sum_logits(W, query.tokens, layout.in_vocab), layout.out_vocab
        )
        for query in ood_queries(layout)
    ]
