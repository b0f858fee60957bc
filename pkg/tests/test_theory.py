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

import json

import numpy as np
import pytest

from twohop_lab.exceptions import (
    DidNotConverge,
    InfeasiblePoint,
    InvalidConfig,
    InvalidDimension,
    NegativeRadicand,
)
from twohop_lab.theory import restricted
from twohop_lab.theory.programs import IdProgram, NoIdProgram, make_program
from twohop_lab.theory.restricted import (
    ReducedPointId,
    ReducedPointNoId,
    assemble_w,
    assemble_w_noid,
    feasibility_residual_id,
    feasibility_residual_noid,
    id_inequalities,
    matrix_ood_margins,
    nuclear_norm_closed,
    objective_id,
    objective_noid,
    ood_margin_id,
    ood_margin_noid,
    sample_feasible_id,
    template_constraints,
)
from twohop_lab.theory.solver import (
    SolverConfig,
    augmented_lagrangian,
    kkt_check,
    kkt_residuals,
    refit_multipliers,
    solve,
    solve_id,
    solve_noid,
)


def svd_norm(W):
    return float(np.linalg.svd(W, compute_uv=False).sum())


def candidate_noid(n):
    return ReducedPointNoId(
        n, a1=1.0, a2=-1 / n, b1=-1 / (n - 1), b2=1 / (n * (n - 1)), alpha=0.0
    )


# -- restricted form -------------------------------------------------------


def test_assemble_zero():
    assert not assemble_w(ReducedPointId(n=3)).any()
    assert assemble_w(ReducedPointId(n=3)).shape == (8, 6)


def test_assemble_single_block():
    W = assemble_w(ReducedPointId(n=2, a1=1.0))
    expected = np.zeros((6, 4))
    expected[:2, :2] = np.eye(2)
    assert np.array_equal(W, expected)


def test_assemble_relation_rows():
    W = assemble_w(ReducedPointId(n=3, e=1.0, g=2.0, f=3.0, h=4.0))
    assert np.array_equal(W[6], [1, 1, 1, 2, 2, 2])
    assert np.array_equal(W[7], [3, 3, 3, 4, 4, 4])


def test_assemble_noid_symmetry():
    point = ReducedPointNoId(3, a1=1.5, a2=0.25, b1=-0.5, b2=0.1, alpha=0.3)
    W = assemble_w_noid(point)
    assert np.array_equal(W[:3, :3], W[3:6, 3:])
    assert np.array_equal(W[:3, 3:], W[3:6, :3])
    assert np.array_equal(W[6, :3], -W[6, 3:])
    assert np.array_equal(W[7], W[6, ::-1])
    assert point.as_dict()["beta"] == -0.3


@pytest.mark.parametrize("n", [0, 1])
def test_dimension_checked(n):
    with pytest.raises(InvalidDimension):
        assemble_w(ReducedPointId(n=n))
    with pytest.raises(InvalidDimension):
        IdProgram(n)


def test_closed_form_examples():
    assert nuclear_norm_closed(ReducedPointId(n=4)) == 0.0
    point = ReducedPointId(n=3, a1=1.0, d1=1.0)
    assert nuclear_norm_closed(point) == pytest.approx(6.0)
    assert svd_norm(assemble_w(point)) == pytest.approx(6.0)


@pytest.mark.parametrize("n", [3, 5, 8])
def test_closed_form_matches_svd(n):
    rng = np.random.default_rng(n)
    for _ in range(100):
        point = sample_feasible_id(n, rng)
        exact = svd_norm(assemble_w(point))
        assert abs(nuclear_norm_closed(point) - exact) <= 1e-8 * exact


def test_closed_form_general_point():
    # g and h independent of e and f
    point = ReducedPointId(n=3, a1=1.0, b1=1.0, c1=1.0, d1=1.0, e=0.5, h=-2.0)
    assert nuclear_norm_closed(point) == pytest.approx(svd_norm(assemble_w(point)))


def test_closed_form_negative_radicand(monkeypatch):
    coefficients = {"A1": 0.0, "A2": 0.0, "D1": 0.0, "D2": 0.0, "B1": 1.0, "B2": 0.0}
    monkeypatch.setattr(restricted, "gram_coefficients", lambda point: coefficients)
    with pytest.raises(NegativeRadicand):
        nuclear_norm_closed(ReducedPointId(n=3, a1=1.0))


def test_sample_feasible_id():
    rng = np.random.default_rng(11)
    for n in (2, 5, 20):
        point = sample_feasible_id(n, rng)
        assert feasibility_residual_id(point) <= 1e-12
        assert np.all(template_constraints(point) >= -1e-12)
        assert point.t == abs(point.u)


def test_objective_id_equals_closed_form_on_feasible_points():
    rng = np.random.default_rng(5)
    for _ in range(50):
        point = sample_feasible_id(6, rng)
        assert objective_id(point) == pytest.approx(nuclear_norm_closed(point))


def test_objective_id_zero_and_homogeneous():
    assert objective_id(ReducedPointId(n=5)) == 0.0
    point = sample_feasible_id(5, np.random.default_rng(2))
    assert objective_id(point.scaled(2.0)) == pytest.approx(2 * objective_id(point))


def test_objective_id_requires_equalities():
    with pytest.raises(InfeasiblePoint):
        objective_id(ReducedPointId(n=3, a1=1.0))


def test_objective_noid_candidate():
    for n in (5, 20):
        point = candidate_noid(n)
        assert feasibility_residual_noid(point) <= 1e-12
        assert objective_noid(point) == pytest.approx(2 * (n - 1))


def test_template_and_substituted_encodings_agree():
    point = sample_feasible_id(4, np.random.default_rng(8))
    template = template_constraints(point)
    substituted = id_inequalities(point)
    assert template[2] == pytest.approx(substituted[1])
    assert template[3] == pytest.approx(substituted[5])


def test_ood_margin_id_matches_row_sums():
    point = sample_feasible_id(4, np.random.default_rng(3))
    closed = ood_margin_id(point)
    direct = matrix_ood_margins(assemble_w(point), 4)
    assert len(closed) == 4
    for a, b in zip(closed, direct):
        assert a.query == b.query
        assert abs(a.q - b.q) <= 1e-10
        for token, gap in a.gaps.items():
            assert abs(gap - b.gaps[token]) <= 1e-10


def test_ood_margin_id_degenerate_object_gap():
    p = sample_feasible_id(4, np.random.default_rng(3))
    c2 = -p.a1 / 4 - p.a2
    e = max(p.e, (1 + c2 - p.a1 - p.a2) / 2 + 1)
    point = p._replace(c1=0.0, c2=c2, e=e, g=-e)
    point = point._replace(t=abs(point.u))
    assert feasibility_residual_id(point) <= 1e-12
    assert all(report.q <= 0 for report in ood_margin_id(point))


def test_ood_margin_requires_feasibility():
    with pytest.raises(InfeasiblePoint):
        ood_margin_id(ReducedPointId(n=3))
    with pytest.raises(InfeasiblePoint):
        ood_margin_noid(ReducedPointNoId(3))


def test_ood_margin_noid_candidate():
    point = candidate_noid(6)
    closed = ood_margin_noid(point)
    direct = matrix_ood_margins(assemble_w_noid(point), 6)
    assert all(report.q < 0 for report in closed)
    assert [r.q for r in closed] == pytest.approx([r.q for r in direct], abs=1e-12)
    assert closed[0].q == pytest.approx(-1.0)


# -- programs --------------------------------------------------------------


@pytest.mark.parametrize("program", [IdProgram(5), NoIdProgram(5)])
def test_program_gradients(program):
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = program.start(rng)
        assert program.feasibility(x) <= 1e-12
        numeric = np.array(
            [
                (program.objective(x + h) - program.objective(x - h)) / 2e-6
                for h in np.eye(x.size) * 1e-6
            ]
        )
        assert np.allclose(program.gradient(x), numeric, atol=1e-6)


@pytest.mark.parametrize("program", [IdProgram(4), NoIdProgram(4)])
def test_program_jacobians(program):
    x = program.start(np.random.default_rng(1))
    for values, jacobian in (
        (program.inequalities, program.inequality_jacobian),
        (program.equalities, program.equality_jacobian),
    ):
        numeric = np.array(
            [(values(x + h) - values(x - h)) / 2e-6 for h in np.eye(x.size) * 1e-6]
        ).T
        assert np.allclose(jacobian(x), numeric, atol=1e-6)


def test_make_program():
    assert make_program("id", 3).name == "id"
    assert make_program("noid", 3).name == "noid"
    with pytest.raises(InvalidConfig):
        make_program("other", 3)


def test_noid_reports_unsmoothed_objective():
    program = NoIdProgram(5, smoothing=1e-3)
    x = np.array([1.0, -0.2, -0.25, 0.05, 0.0, 1.0])
    assert program.reported_objective(x) == pytest.approx(8.0)
    assert program.objective(x) > program.reported_objective(x)


# -- solver ----------------------------------------------------------------


def test_solver_config_validation():
    with pytest.raises(InvalidConfig):
        SolverConfig(starts=0).validate()
    with pytest.raises(InvalidConfig):
        SolverConfig(inner="newton").validate()
    with pytest.raises(InvalidConfig):
        solve("other", 5)


def test_kkt_residual_of_non_stationary_point():
    program = IdProgram(5)
    x = program.start(np.random.default_rng(0))
    x[0] += 5.0
    summary = kkt_residuals(program, x, np.zeros(9), np.zeros(2))
    assert summary.stationarity > 1.0
    assert summary.complementarity == 0.0


def test_did_not_converge():
    config = SolverConfig(starts=2, rounds=1, inner_max_iter=1, polish=False)
    with pytest.raises(DidNotConverge):
        solve_id(5, config)


@pytest.mark.parametrize("n", [3, 5, 20])
def test_refit_multipliers_at_noid_optimum(n):
    program = NoIdProgram(n)
    p = candidate_noid(n)
    x = np.array([p.a1, p.a2, p.b1, p.b2, p.alpha, 1.0])
    lam, mu = refit_multipliers(program, x)
    assert lam == pytest.approx([2 * (n - 1), 0, 2 * (n - 1), 0, 0], abs=1e-8)
    assert mu == pytest.approx([0.0], abs=1e-8)
    assert kkt_residuals(program, x, lam, mu).stationarity <= 1e-10


def test_refit_multipliers_ignores_slack_constraints():
    program = IdProgram(5)
    x = program.start(np.random.default_rng(1))
    inactive = program.inequalities(x) > 1e-6
    lam, _ = refit_multipliers(program, x)
    assert np.all(lam >= 0)
    assert np.all(lam[inactive] == 0)


def test_gd_inner_solver_runs():
    program = NoIdProgram(4)
    x0 = program.start(np.random.default_rng(0))
    result = augmented_lagrangian(program, x0, SolverConfig(inner="gd", rounds=3))
    assert result.rounds <= 3
    assert np.all(np.isfinite(result.x))


SIZES = [
    5,
    20,
    pytest.param(10, marks=pytest.mark.slow),
]


@pytest.fixture(scope="module", params=SIZES)
def id_report(request):
    return solve_id(request.param)


@pytest.fixture(scope="module", params=SIZES)
def noid_report(request):
    return solve_noid(request.param)


def test_id_report_converged(id_report):
    assert id_report.feasibility_residual <= 1e-7
    assert id_report.kkt_residual <= 1e-5
    assert all(lam >= 0 for lam in id_report.inequality_multipliers)
    assert len(id_report.multipliers) == 11


def test_id_margins_positive(id_report):
    assert len(id_report.margins) == id_report.n
    assert all(report.q > 0 and report.correct for report in id_report.margins)


def test_id_optimum_structure(id_report):
    p, n = id_report.point, id_report.n
    assert p.a1 == pytest.approx(1.0, abs=1e-6)
    assert p.a1 + p.a2 + 2 * p.e - p.c1 - p.c2 - 1 == pytest.approx(0.0, abs=1e-6)
    assert p.f <= -1 + 1e-6
    assert p.a1 + n * p.a2 == pytest.approx(p.e, abs=1e-6)
    assert p.c1 + n * p.c2 == pytest.approx(-p.e, abs=1e-6)
    assert abs(p.t - abs(p.u)) <= 1e-7
    assert np.abs(assemble_w(p).sum(axis=1)).max() <= 1e-7
    assert id_report.flags["c1_positive"]
    assert id_report.flags["slack_tight"]
    assert id_report.flags["symmetric"]


def test_id_kkt_check(id_report):
    summary = kkt_check(id_report)
    assert summary.stationarity <= 1e-5
    assert summary.complementarity <= 1e-5
    lam, mu = id_report.inequality_multipliers, id_report.equality_multipliers
    assert lam[1] == pytest.approx(id_report.n * mu[0], abs=1e-5)


def test_id_report_json(id_report):
    data = json.loads(id_report.to_json())
    assert data["program"] == "id"
    assert data["n"] == id_report.n
    assert len(data["margins"]) == id_report.n
    assert set(data["point"]) >= {"a1", "h", "t"}
    assert id_report.to_json() == id_report.to_json()


def test_noid_optimum(noid_report):
    p, n = noid_report.point, noid_report.n
    assert noid_report.feasibility_residual <= 1e-7
    assert p.a1 == pytest.approx(1.0, abs=1e-6)
    assert p.a2 == pytest.approx(-1 / n, abs=1e-6)
    assert (p.a1 + p.a2) - (p.b1 + p.b2) >= 1e-4
    assert noid_report.objective == pytest.approx(2 * (n - 1), rel=1e-6)
    assert all(report.q < 0 for report in noid_report.margins)
    assert all(r.q < 0 for r in ood_margin_noid(p.scaled(2.0)))


def test_solve_is_deterministic():
    config = SolverConfig(starts=2)
    assert solve_noid(4, config).to_json() == solve_noid(4, config).to_json()


def test_threaded_starts_match_sequential():
    sequential = solve_noid(4, SolverConfig(starts=4))
    threaded = solve_noid(4, SolverConfig(starts=4, workers=3))
    assert sequential.to_json() == threaded.to_json()


def test_noid_report_json(noid_report):
    data = json.loads(noid_report.to_json())
    assert data["program"] == "noid"
    assert set(data["flags"]) == {"slack_tight", "symmetric", "starts_agree"}
    assert all(isinstance(value, bool) for value in data["flags"].values())
    assert data["flags"]["slack_tight"] and data["flags"]["symmetric"]
    assert all(q < 0 for q in data["margins"])
