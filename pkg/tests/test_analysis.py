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

from twohop_lab import analysis
from twohop_lab.analysis import (
    EmbMlpProvider,
    MatrixProvider,
    TransformerProvider,
    alignment,
    alignment_of_pairs,
    as_provider,
    fit_blocks,
    margins,
    ood_accuracy,
    template_pattern_check,
)
from twohop_lab.exceptions import InvalidConfig, ShapeMismatch, UnknownToken
from twohop_lab.models import nanoformer
from twohop_lab.models.embmlp import init_params, logit_matrix
from twohop_lab.models.taskgen import DatasetSpec, generate
from twohop_lab.models.training import TrainConfig
from twohop_lab.theory.restricted import (
    ReducedPointId,
    ReducedPointNoId,
    assemble_w,
    assemble_w_noid,
    sample_feasible_id,
)


def composing_matrix(n, c1=1.0):
    """Subjects point at their bridge and object, bridges at their object."""
    return assemble_w(ReducedPointId(n=n, a1=1.0, c1=c1, d1=1.0, h=2.0))


def peaked_matrix(n):
    return assemble_w(ReducedPointId(n=n, b1=3.0, d1=2.0, e=1.0, g=-1.0, f=-1.0, h=1.0))


def candidate_noid(n):
    return ReducedPointNoId(
        n, a1=1.0, a2=-1 / n, b1=-1 / (n - 1), b2=1 / (n * (n - 1)), alpha=0.0
    )


# -- providers and margins -------------------------------------------------


def test_as_provider(dataset_id, tiny_tf_params):
    params = init_params(dataset_id.layout, 4, TrainConfig(), seed=0)
    assert isinstance(as_provider(params), EmbMlpProvider)
    assert isinstance(as_provider(tiny_tf_params), TransformerProvider)
    W = composing_matrix(5)
    assert isinstance(as_provider(W, dataset_id.layout), MatrixProvider)
    provider = MatrixProvider.from_layout(W, dataset_id.layout)
    assert as_provider(provider) is provider


def test_as_provider_errors(dataset_id):
    with pytest.raises(ValueError):
        as_provider(composing_matrix(5))
    with pytest.raises(TypeError):
        as_provider([[1.0]])
    with pytest.raises(ShapeMismatch):
        MatrixProvider.from_layout(np.zeros((4, 4)), dataset_id.layout)


def test_margins_of_composing_matrix(dataset_id):
    reports = margins(composing_matrix(5), dataset_id.test_ood, dataset_id.layout)
    assert len(reports) == 5
    for report in reports:
        assert report.correct
        assert report.predicted == report.query.target
        assert report.q == pytest.approx(1.0)
        assert len(report.gaps) == 9


def test_ood_accuracy_ties_go_to_lowest_id(dataset_id):
    assert ood_accuracy(composing_matrix(5), dataset_id) == 1.0
    # all objects tie, so every query predicts the first object
    assert ood_accuracy(composing_matrix(5, c1=0.0), dataset_id) == pytest.approx(0.2)


def test_embmlp_margins_match_its_logit_matrix(dataset_id):
    params = init_params(dataset_id.layout, 6, TrainConfig(), seed=4)
    direct = margins(params, dataset_id.test_ood)
    through_matrix = margins(
        logit_matrix(params), dataset_id.test_ood, dataset_id.layout
    )
    for a, b in zip(direct, through_matrix):
        assert a.q == pytest.approx(b.q)
        assert a.predicted == b.predicted
    assert ood_accuracy(params, dataset_id) == ood_accuracy(
        logit_matrix(params), dataset_id
    )


def test_transformer_margins_span_full_vocab(dataset_id, tiny_tf_params):
    reports = margins(tiny_tf_params, dataset_id.test_ood)
    vocab_size = dataset_id.layout.vocab_size
    assert all(len(report.gaps) == vocab_size - 1 for report in reports)
    assert 0.0 <= ood_accuracy(tiny_tf_params, dataset_id) <= 1.0


def test_margins_unknown_token(dataset_id, dataset_c2):
    with pytest.raises(UnknownToken):
        margins(composing_matrix(5), dataset_c2.test_ood[-1:], dataset_id.layout)


# -- block fits ------------------------------------------------------------


def test_fit_blocks_recovers_id_point():
    point = sample_feasible_id(4, np.random.default_rng(0))
    fit = fit_blocks(assemble_w(point), 4, with_identity=True)
    assert fit.residual <= 1e-12
    for name, value in fit.params.items():
        assert value == pytest.approx(getattr(point, name), abs=1e-12)
    transposed = fit_blocks(assemble_w(point).T, 4, with_identity=True)
    assert transposed.params == pytest.approx(fit.params)


def test_fit_blocks_recovers_noid_point():
    point = ReducedPointNoId(5, a1=1.2, a2=-0.3, b1=0.4, b2=0.1, alpha=0.7)
    fit = fit_blocks(assemble_w_noid(point), 5, with_identity=False)
    assert fit.residual <= 1e-12
    assert fit.params == pytest.approx(point.as_dict())
    assert set(fit.as_dict()) == {"params", "residual", "with_identity"}


def test_fit_blocks_residual_of_unstructured_matrix():
    W = np.random.default_rng(1).normal(size=(10, 8))
    assert 0.0 < fit_blocks(W, 4, with_identity=True).residual < 1.0
    assert fit_blocks(np.zeros((10, 8)), 4, with_identity=False).residual == 0.0


def test_fit_blocks_shape_errors():
    with pytest.raises(ShapeMismatch):
        fit_blocks(np.zeros((9, 8)), 4, with_identity=True)
    with pytest.raises(ShapeMismatch):
        fit_blocks(np.zeros((4, 2)), 1, with_identity=True)


# -- template patterns -----------------------------------------------------


def test_pattern_check_passes_on_peaked_matrix(dataset_id):
    flags = template_pattern_check(peaked_matrix(5), dataset_id.layout)
    assert flags.relations_select
    assert flags.bridges_self_peaked
    assert flags.bridges_object_aligned
    assert flags.self_peaked_count == flags.object_aligned_count == 5


def test_pattern_check_fails_on_symmetric_solution(dataset_id):
    W = assemble_w_noid(candidate_noid(5))
    flags = template_pattern_check(W, dataset_id.layout)
    assert not flags.relations_select
    assert not flags.bridges_self_peaked
    assert not flags.bridges_object_aligned
    assert flags.object_aligned_count == 0


def test_pattern_check_requires_separated_top_two(dataset_id):
    W = peaked_matrix(5)
    W[5, 1] = 2.0  # bridge b1 ties its object with another bridge
    flags = template_pattern_check(W, dataset_id.layout)
    assert flags.bridges_self_peaked
    assert flags.object_aligned_count == 4


def test_pattern_check_shape(dataset_id):
    with pytest.raises(ShapeMismatch):
        template_pattern_check(np.zeros((3, 3)), dataset_id.layout)


# -- alignment -------------------------------------------------------------


def test_alignment_sampling(dataset_id, tiny_tf_params):
    score = alignment(tiny_tf_params, dataset_id, sample_count=3, seed=7)
    assert score.cosines.shape == (3, 2)
    assert len(score.pairs) == 3
    assert len(set(score.pairs)) == 3
    assert len(score.per_layer) == 2
    assert score.aggregate == score.per_layer[-1]
    assert np.all(np.abs(score.cosines) <= 1.0)
    again = alignment(tiny_tf_params, dataset_id, sample_count=3, seed=7)
    assert again.pairs == score.pairs
    assert np.array_equal(again.cosines, score.cosines)


@pytest.mark.parametrize("count", [0, 6])
def test_alignment_sample_count_range(dataset_id, tiny_tf_params, count):
    with pytest.raises(InvalidConfig):
        alignment(tiny_tf_params, dataset_id, sample_count=count)


def test_alignment_of_pairs(dataset_id, tiny_tf_params):
    with pytest.raises(ValueError):
        alignment_of_pairs(tiny_tf_params, [])
    layout = dataset_id.layout
    bridge = layout.bridges[0]
    score = alignment_of_pairs(tiny_tf_params, [((bridge,), bridge)])
    assert score.cosines[0] == pytest.approx([1.0, 1.0])


@pytest.mark.parametrize("seed", range(5))
def test_untrained_alignment_near_zero(seed):
    dataset = generate(DatasetSpec(n_entities=20, seed=seed))
    params = nanoformer.init_tf_params(nanoformer.default_config(dataset), seed)
    count = len(nanoformer.first_hop_pairs(dataset))
    score = alignment(params, dataset, sample_count=count, seed=seed)
    assert abs(score.aggregate) < 0.5


# -- emitters --------------------------------------------------------------


def test_write_logits_csv(tmp_path, dataset_id):
    path = analysis.write_logits_csv(
        composing_matrix(5), dataset_id.layout, tmp_path / "logits.csv"
    )
    lines = path.read_text().splitlines()
    assert lines[0] == "token," + ",".join(
        [f"b{k}" for k in range(1, 6)] + [f"c{k}" for k in range(1, 6)]
    )
    assert len(lines) == 1 + len(dataset_id.layout.in_vocab)
    assert lines[1].startswith("a1,1.0,0.0")
    assert lines[-1].startswith("r2,0.0")


def test_write_margins_csv(tmp_path, dataset_id):
    reports = margins(composing_matrix(5), dataset_id.test_ood, dataset_id.layout)
    path = analysis.write_margins_csv(
        reports, dataset_id.layout, tmp_path / "margins.csv"
    )
    lines = path.read_text().splitlines()
    assert lines[0] == "query,target,predicted,q,correct"
    assert lines[1] == "a1 r1_1 r2,c1,c1,1.0,true"


def test_write_alignment_csv(tmp_path, dataset_id, tiny_tf_params):
    score = alignment(tiny_tf_params, dataset_id, sample_count=2)
    path = analysis.write_alignment_csv(score, tmp_path / "alignment.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,pair,cosine"
    assert len(lines) == 1 + 2 * 2
    assert lines[1].startswith("0,0,")


def test_write_patterns_json(tmp_path, dataset_id):
    W = peaked_matrix(5)
    flags = template_pattern_check(W, dataset_id.layout)
    path = analysis.write_patterns_json(flags, tmp_path / "patterns.json")
    assert set(json.loads(path.read_text())) == {"patterns"}
    fit = fit_blocks(W, 5, with_identity=True)
    path = analysis.write_patterns_json(flags, tmp_path / "both.json", fit)
    data = json.loads(path.read_text())
    assert data["patterns"]["bridges_object_aligned"] is True
    assert data["block_fit"]["residual"] == pytest.approx(0.0)
