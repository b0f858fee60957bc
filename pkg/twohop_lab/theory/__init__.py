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
"""The reduced nuclear-norm programs, their solver and the full-matrix oracle."""

from .oracle import OracleConfig, OracleResult, full_matrix_oracle, training_margins
from .programs import IdProgram, NoIdProgram
from .restricted import (
    ReducedPointId,
    ReducedPointNoId,
    assemble_w,
    assemble_w_noid,
    nuclear_norm_closed,
    objective_id,
    ood_margin_id,
    ood_margin_noid,
    sample_feasible_id,
    template_constraints,
)
from .solver import SolveReport, SolverConfig, kkt_check, solve_id, solve_noid

__all__ = (
    "ReducedPointId",
    "ReducedPointNoId",
    "assemble_w",
    "assemble_w_noid",
    "nuclear_norm_closed",
    "objective_id",
    "template_constraints",
    "sample_feasible_id",
    "ood_margin_id",
    "ood_margin_noid",
    "IdProgram",
    "NoIdProgram",
    "SolverConfig",
    "SolveReport",
    "solve_id",
    "solve_noid",
    "kkt_check",
    "OracleConfig",
    "OracleResult",
    "full_matrix_oracle",
    "training_margins",
)
