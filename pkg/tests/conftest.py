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

from __future__ import annotations

import pytest

from twohop_lab.models.nanoformer import TransformerConfig, init_tf_params
from twohop_lab.models.taskgen import DatasetSpec, generate


@pytest.fixture
def small_spec():
    return DatasetSpec(n_entities=5, complexity=1, include_identity=True)


@pytest.fixture
def dataset_id(small_spec):
    return generate(small_spec)


@pytest.fixture
def dataset_noid(small_spec):
    return generate(small_spec._replace(include_identity=False))


@pytest.fixture
def dataset_c2():
    return generate(DatasetSpec(n_entities=3, complexity=2))


@pytest.fixture
def tiny_tf_config(dataset_id):
    return TransformerConfig(
        d_vocab=dataset_id.layout.vocab_size, d_m=8, d_k=4, n_heads=2, n_layers=1
    )


@pytest.fixture
def tiny_tf_params(tiny_tf_config):
    return init_tf_params(tiny_tf_config, seed=3)
