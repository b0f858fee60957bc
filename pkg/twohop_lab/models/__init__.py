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
"""This package contains the task generator, the two trainable models
(the embedding-projection model and the small decoder-only transformer),
their shared training machinery and checkpoint formats, and the lookup of
run defaults."""

from .embmlp import EmbMlpParams
from .margin import MarginReport
from .nanoformer import HiddenStates, TransformerConfig, TransformerParams
from .taskgen import Dataset, DatasetSpec, Example, ExampleKind, VocabLayout
from .training import TraceRow, TrainConfig, TrainTrace

__all__ = (
    "Dataset",
    "DatasetSpec",
    "Example",
    "ExampleKind",
    "VocabLayout",
    "EmbMlpParams",
    "TransformerConfig",
    "TransformerParams",
    "HiddenStates",
    "MarginReport",
    "TrainConfig",
    "TrainTrace",
    "TraceRow",
)
