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

from .exceptions import (
    DidNotConverge,
    Diverged,
    InvalidConfig,
    InvalidSpec,
    NumericalError,
    TwoHopException,
)
from .twohop_lab import LabConfig, TwoHopLab

__all__ = [
    "TwoHopException",
    "InvalidSpec",
    "InvalidConfig",
    "NumericalError",
    "Diverged",
    "DidNotConverge",
    "LabConfig",
    "TwoHopLab",
]
