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
Augmented-Lagrangian solver for the reduced programs.

Each outer round minimizes the Powell-Hestenes-Rockafellar augmented
Lagrangian in x, then updates the multipliers::

    lambda <- max(0, lambda - rho g(x))
    mu     <- mu - rho h(x)

and raises the penalty rho tenfold. Once a round is feasible the point is
polished by SLSQP on the full program and the multipliers are refit by
bounded least squares on the active constraints. Several seeded starts run
independently; the lowest objective wins, ties going to the lowest seed.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, NamedTuple, Optional, Tuple

import numpy as np
from scipy.optimize import lsq_linear, minimize

from ..exceptions import DidNotConverge, InvalidConfig
from ..models.margin import MarginReport
from ..utils import make_rng, stable_json, timed
from .programs import IdProgram, NoIdProgram, Point, Program, make_program
from .restricted import (
    ReducedPointId,
    assemble_w,
    assemble_w_noid,
    ood_margin_id,
    ood_margin_noid,
)

_LOGGER = logging.getLogger(__name__)

_INNER_METHODS = ("lbfgs", "gd")


class SolverConfig(NamedTuple):
    starts: int = 8
    seed: int = 0
    rounds: int = 20
    rho0: float = 10.0
    rho_factor: float = 10.0
    rho_max: float = 1e6
    inner: str = "lbfgs"
    inner_tol: float = 1e-10
    inner_max_iter: int = 5000
    feasibility_tol: float = 1e-7
    kkt_tol: float = 1e-5
    smoothing: float = 1e-6
    active_tol: float = 1e-6
    polish: bool = True
    workers: int = 1

    def validate(self) -> SolverConfig:
        if self.starts < 1 or self.rounds < 1:
            raise InvalidConfig("starts and rounds must be positive")
        if self.inner not in _INNER_METHODS:
            raise InvalidConfig(
                f"inner must be one of {_INNER_METHODS}, got {self.inner!r}"
            )
        if not (self.rho0 > 0 and self.rho_factor >= 1 and self.rho_max >= self.rho0):
            raise InvalidConfig("Penalty schedule must be positive and nondecreasing")
        if self.workers < 1:
            raise InvalidConfig(f"workers must be positive: {self.workers}")
        if self.active_tol <= 0:
            raise InvalidConfig(f"active_tol must be positive: {self.active_tol}")
        return self


class KktSummary(NamedTuple):
    stationarity: float
    complementarity: float


class StartResult(NamedTuple):
    seed: int
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    objective: float
    feasibility: float
    stationarity: float
    rounds: int

    def converged(self, config: SolverConfig) -> bool:
        return (
            self.feasibility <= config.feasibility_tol
            and self.stationarity <= config.kkt_tol
        )


class SolveReport(NamedTuple):
    program: str
    n: int
    point: Point
    x: tuple[float, ...]
    objective: float
    feasibility_residual: float
    kkt_residual: float
    complementarity: float
    inequality_multipliers: tuple[float, ...]
    equality_multipliers: tuple[float, ...]
    margins: tuple[MarginReport, ...]
    flags: dict[str, bool]
    starts: tuple[dict[str, Any], ...]

    @property
    def multipliers(self) -> tuple[float, ...]:
        """lambda_1..lambda_m followed by mu_1..mu_p."""
        return self.inequality_multipliers + self.equality_multipliers

    def as_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "program": self.program,
            "point": self.point.as_dict(),
            "objective": float(self.objective),
            "feasibility_residual": float(self.feasibility_residual),
            "kkt_residual": float(self.kkt_residual),
            "complementarity": float(self.complementarity),
            "multipliers": [float(v) for v in self.multipliers],
            "margins": [float(report.q) for report in self.margins],
            "flags": {name: bool(value) for name, value in self.flags.items()},
            "starts": list(self.starts),
        }

    def to_json(self) -> str:
        return stable_json(self.as_dict())


def kkt_residuals(
    program: Program, x: np.ndarray, lam: np.ndarray, mu: np.ndarray
) -> KktSummary:
    """
    Norm of ``grad F - sum lambda_i grad g_i - sum mu_j grad h_j`` and
    ``sum |lambda_i g_i|``.
    """
    residual = (
        program.gradient(x)
        - program.inequality_jacobian(x).T @ lam
        - program.equality_jacobian(x).T @ mu
    )
    complementarity = float(np.abs(lam * program.inequalities(x)).sum())
    return KktSummary(float(np.linalg.norm(residual)), complementarity)


def kkt_check(report: SolveReport, program: Optional[str] = None) -> KktSummary:
    """Recompute stationarity and complementarity from a report."""
    name = program or report.program
    prog = make_program(name, report.n)
    return kkt_residuals(
        prog,
        np.asarray(report.x),
        np.asarray(report.inequality_multipliers),
        np.asarray(report.equality_multipliers),
    )


FunGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def _minimize_lbfgs(fun: FunGrad, x0: np.ndarray, config: SolverConfig) -> np.ndarray:
    result = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": config.inner_max_iter,
            "gtol": config.inner_tol,
            "ftol": 1e-15,
            "maxcor": 20,
            "maxls": 50,
        },
    )
    if not result.success:
        _LOGGER.debug(f"Inner solve stopped early: {result.message}")
    return result.x


def _minimize_gd(fun: FunGrad, x0: np.ndarray, config: SolverConfig) -> np.ndarray:
    """Steepest descent with an Armijo backtracking line search."""
    x = x0.copy()
    step = 1.0
    value, grad = fun(x)
    for _ in range(config.inner_max_iter):
        if np.abs(grad).max() <= config.inner_tol:
            break
        sq_norm = float(grad @ grad)
        while True:
            candidate = x - step * grad
            cand_value, cand_grad = fun(candidate)
            if cand_value <= value - 1e-4 * step * sq_norm or step < 1e-20:
                break
            step *= 0.5
        x, value, grad = candidate, cand_value, cand_grad
        step *= 2.0
    return x


_INNER = {"lbfgs": _minimize_lbfgs, "gd": _minimize_gd}


def refit_multipliers(
    program: Program, x: np.ndarray, active_tol: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Multipliers minimizing the stationarity residual at x, with lambda >= 0
    on the constraints within active_tol of their bound and zero elsewhere.
    """
    g = program.inequalities(x)
    active = g <= active_tol
    J = program.inequality_jacobian(x)[active]
    E = program.equality_jacobian(x)
    k, p = J.shape[0], E.shape[0]
    lam = np.zeros(g.size)
    if k + p == 0:
        return lam, np.zeros(0)
    A = np.vstack([J, E]).T
    lower = np.concatenate([np.zeros(k), np.full(p, -np.inf)])
    upper = np.full(k + p, np.inf)
    fit = lsq_linear(A, program.gradient(x), bounds=(lower, upper), method="bvls")
    lam[active] = fit.x[:k]
    return lam, fit.x[k:]


def _polish(program: Program, x: np.ndarray, config: SolverConfig) -> np.ndarray:
    """SLSQP from a feasible point; the input is kept if SLSQP makes it worse."""
    result = minimize(
        program.objective,
        x,
        jac=program.gradient,
        method="SLSQP",
        constraints=[
            {
                "type": "ineq",
                "fun": program.inequalities,
                "jac": program.inequality_jacobian,
            },
            {
                "type": "eq",
                "fun": program.equalities,
                "jac": program.equality_jacobian,
            },
        ],
        options={"ftol": 1e-15, "maxiter": config.inner_max_iter},
    )
    polished = result.x
    if (
        program.feasibility(polished) > config.feasibility_tol
        or program.objective(polished)
        > program.objective(x) + 1e-6 * max(1.0, abs(program.objective(x)))
    ):
        _LOGGER.debug(f"Polish of {program} rejected: {result.message}")
        return x
    return polished


def augmented_lagrangian(
    program: Program, x0: np.ndarray, config: SolverConfig, seed: int = 0
) -> StartResult:
    """Run the outer rounds from one start."""
    x = np.asarray(x0, dtype=float).copy()
    m = program.inequalities(x).size
    p = program.equalities(x).size
    lam = np.zeros(m)
    mu = np.zeros(p)
    rho = config.rho0
    inner = _INNER[config.inner]

    def lagrangian(x: np.ndarray, lam: np.ndarray, mu: np.ndarray, rho: float):
        g = program.inequalities(x)
        h = program.equalities(x)
        shifted = np.maximum(0.0, lam - rho * g)
        value = (
            program.objective(x)
            + float((shifted**2 - lam**2).sum()) / (2 * rho)
            - float(mu @ h)
            + 0.5 * rho * float(h @ h)
        )
        grad = (
            program.gradient(x)
            - program.inequality_jacobian(x).T @ shifted
            - program.equality_jacobian(x).T @ (mu - rho * h)
        )
        return value, grad

    rounds = 0
    feasibility = stationarity = float("inf")
    for rounds in range(1, config.rounds + 1):
        x = inner(
            lambda z, lam=lam, mu=mu, rho=rho: lagrangian(z, lam, mu, rho), x, config
        )
        lam = np.maximum(0.0, lam - rho * program.inequalities(x))
        mu = mu - rho * program.equalities(x)
        feasibility = program.feasibility(x)
        stationarity = kkt_residuals(program, x, lam, mu).stationarity
        if config.polish and feasibility <= config.feasibility_tol:
            x = _polish(program, x, config)
            lam, mu = refit_multipliers(program, x, config.active_tol)
            feasibility = program.feasibility(x)
            stationarity = kkt_residuals(program, x, lam, mu).stationarity
        _LOGGER.debug(
            f"{program} start {seed} round {rounds}: rho={rho:.0e} "
            f"feasibility={feasibility:.2e} stationarity={stationarity:.2e}"
        )
        if feasibility <= config.feasibility_tol and stationarity <= config.kkt_tol:
            break
        rho = min(rho * config.rho_factor, config.rho_max)

    return StartResult(
        seed,
        x,
        lam,
        mu,
        program.reported_objective(x),
        feasibility,
        stationarity,
        rounds,
    )


def _run_start(program: Program, seed: int, config: SolverConfig) -> StartResult:
    x0 = program.start(make_rng(seed))
    return augmented_lagrangian(program, x0, config, seed)


def multi_start(program: Program, config: SolverConfig) -> list[StartResult]:
    """Run every seeded start; pure given (program, config)."""
    config.validate()
    seeds = [config.seed + k for k in range(config.starts)]
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(lambda s: _run_start(program, s, config), seeds))
    else:
        results = [_run_start(program, s, config) for s in seeds]
    for result in results:
        if not result.converged(config):
            _LOGGER.warning(
                f"{program} start {result.seed} did not converge: "
                f"feasibility={result.feasibility:.2e}, "
                f"stationarity={result.stationarity:.2e}"
            )
    return results


def _best(
    results: list[StartResult], config: SolverConfig, program: Program
) -> StartResult:
    converged = [r for r in results if r.converged(config)]
    if not converged:
        closest = min(results, key=lambda r: (r.feasibility + r.stationarity, r.seed))
        raise DidNotConverge(
            f"No start of {program} converged; best has feasibility "
            f"{closest.feasibility:.2e} and stationarity {closest.stationarity:.2e}"
        )
    return min(converged, key=lambda r: (r.objective, r.seed))


def _starts_agree(
    results: list[StartResult], best: StartResult, config: SolverConfig
) -> bool:
    scale = max(abs(best.objective), 1.0)
    return all(
        abs(r.objective - best.objective) <= 1e-6 * scale
        for r in results
        if r.converged(config)
    )


def _start_rows(results: list[StartResult], config: SolverConfig) -> tuple[dict, ...]:
    return tuple(
        {
            "seed": r.seed,
            "objective": r.objective,
            "converged": r.converged(config),
            "rounds": r.rounds,
        }
        for r in results
    )


def _clamped(lam: np.ndarray) -> tuple[float, ...]:
    if lam.size and lam.min() < -1e-8:
        _LOGGER.warning(f"Negative multiplier {lam.min():.2e} clamped to zero")
    return tuple(float(v) for v in np.maximum(lam, 0.0))


def _report(
    program: Program,
    results: list[StartResult],
    config: SolverConfig,
    margins: list[MarginReport],
    flags: dict[str, bool],
    best: StartResult,
) -> SolveReport:
    kkt = kkt_residuals(program, best.x, best.lam, best.mu)
    return SolveReport(
        program=program.name,
        n=program.n,
        point=program.point(best.x),
        x=tuple(float(v) for v in best.x),
        objective=best.objective,
        feasibility_residual=best.feasibility,
        kkt_residual=kkt.stationarity,
        complementarity=kkt.complementarity,
        inequality_multipliers=_clamped(best.lam),
        equality_multipliers=tuple(float(v) for v in best.mu),
        margins=tuple(margins),
        flags=flags,
        starts=_start_rows(results, config),
    )


@timed
def solve_id(n: int, config: SolverConfig = SolverConfig()) -> SolveReport:
    """
    Minimize the with-identity program.

    :param n: Instance size, at least 2.
    :param config: Solver settings.
    :returns: The best converged start with multipliers, OOD margins and flags.
    :raises InvalidDimension: If n < 2.
    :raises DidNotConverge: If no start meets the tolerances.
    """
    program = IdProgram(n)
    results = multi_start(program, config)
    best = _best(results, config, program)
    point: ReducedPointId = program.point(best.x)
    margins = ood_margin_id(point)
    W = assemble_w(point)
    flags = {
        "c1_positive": bool(point.c1 > 0),
        "slack_tight": bool(abs(point.t - abs(point.u)) <= 1e-7),
        "symmetric": bool(np.abs(W.sum(axis=1)).max() <= 1e-7),
        "starts_agree": bool(_starts_agree(results, best, config)),
    }
    _LOGGER.info(
        f"Solved id program n={n}: objective {best.objective:.6f}, "
        f"min OOD margin {min(r.q for r in margins):.4f}"
    )
    return _report(program, results, config, margins, flags, best)


@timed
def solve_noid(n: int, config: SolverConfig = SolverConfig()) -> SolveReport:
    """
    Minimize the failure program (no identity supervision).

    :raises InvalidDimension: If n < 2.
    :raises DidNotConverge: If no start meets the tolerances.
    """
    program = NoIdProgram(n, config.smoothing)
    results = multi_start(program, config)
    best = _best(results, config, program)
    point = program.point(best.x)
    margins = ood_margin_noid(point)
    W = assemble_w_noid(point)
    s = float(best.x[5])
    flags = {
        "slack_tight": bool(abs(s - max(point.a1, abs(point.b1))) <= 1e-7),
        "symmetric": bool(np.abs(W.sum(axis=1)).max() <= 1e-7),
        "starts_agree": bool(_starts_agree(results, best, config)),
    }
    _LOGGER.info(
        f"Solved noid program n={n}: objective {best.objective:.6f}, "
        f"max OOD margin {max(r.q for r in margins):.4f}"
    )
    return _report(program, results, config, margins, flags, best)


def solve(program: str, n: int, config: SolverConfig = SolverConfig()) -> SolveReport:
    if program == "id":
        return solve_id(n, config)
    if program == "noid":
        return solve_noid(n, config)
    raise InvalidConfig(f"Unknown program {program!r}, expected 'id' or 'noid'")
