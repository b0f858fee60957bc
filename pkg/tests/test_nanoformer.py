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

import numpy as np
import pytest

from twohop_lab.exceptions import InvalidConfig, SequenceTooLong, UnknownToken
from twohop_lab.models import nanoformer
from twohop_lab.models.nanoformer import (
    TransformerConfig,
    TransformerParams,
    decayed,
    init_tf_params,
)
from twohop_lab.models.taskgen import DatasetSpec, generate
from twohop_lab.models.training import TrainConfig


def perturbed(params, scale=0.3, seed=0):
    """Parameters far from init so every gradient path carries signal."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, tensor in params.tensors.items():
        noise = rng.normal(0.0, scale, size=tensor.shape)
        tensors[name] = 1.0 + noise if name.endswith(".g") else noise
    return TransformerParams(params.config, tensors)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        TransformerConfig(d_vocab=10, n_layers=0).validate()
    with pytest.raises(InvalidConfig):
        TransformerConfig(d_vocab=10, context=2).validate()
    with pytest.raises(InvalidConfig):
        TransformerConfig(d_vocab=10, init="small", gamma=0.5).validate()


def test_init_shapes(tiny_tf_params):
    config = tiny_tf_params.config
    assert tiny_tf_params["tok_emb"].shape == (config.d_vocab, config.d_m)
    assert tiny_tf_params["h0.attn.w_q"].shape == (config.d_m, config.d_attn)
    assert tiny_tf_params["h0.mlp.w_in"].shape == (config.d_m, 4 * config.d_m)
    assert tiny_tf_params.head.shape == (config.d_m, config.d_vocab)
    assert "lm_head" not in tiny_tf_params.tensors


def test_small_init_sigma():
    config = TransformerConfig(d_vocab=30, d_m=64, init="small", gamma=1.0)
    params = init_tf_params(config, seed=0)
    assert params["h0.mlp.w_in"].std() == pytest.approx(1 / 64, rel=0.05)


def test_small_init_embeddings_use_width():
    config = TransformerConfig(d_vocab=30, d_m=64, init="small", gamma=1.5)
    params = init_tf_params(config, seed=0)
    assert params["tok_emb"].std() == pytest.approx(64**-1.5, rel=0.1)
    assert params["pos_emb"].std() == pytest.approx(64**-1.5, rel=0.3)


def test_decayed_names():
    assert decayed("tok_emb")
    assert decayed("h1.attn.w_o")
    assert not decayed("h0.ln1.g")
    assert not decayed("h0.ln2.b")
    assert not decayed("h0.mlp.b_in")
    assert not decayed("ln_f.g")


def test_layer_norm_normalizes():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 3, 8))
    d = x.shape[-1]
    y, _ = nanoformer._layer_norm(x, np.ones(d), np.zeros(d), 1e-12)
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-6)


def test_forward_matches_straight_line(dataset_id, tiny_tf_config):
    params = perturbed(init_tf_params(tiny_tf_config, seed=0), seed=4)
    for name in params.tensors:
        if name.startswith("h0."):
            params.tensors[name] = np.zeros_like(params.tensors[name])
    tokens = dataset_id.test_ood[0].tokens
    x = params["tok_emb"][tokens[-1]] + params["pos_emb"][len(tokens) - 1]
    x_hat = (x - x.mean()) / np.sqrt(x.var() + tiny_tf_config.ln_eps)
    expected = (params["ln_f.g"] * x_hat + params["ln_f.b"]) @ params["tok_emb"].T
    logits, hidden = nanoformer.tf_forward(params, tokens)
    assert np.allclose(logits, expected, atol=1e-12)
    assert hidden.n_layers == 1


def test_causal_mask():
    config = TransformerConfig(
        d_vocab=12, d_m=8, d_k=4, n_heads=2, n_layers=2, context=5
    )
    params = perturbed(init_tf_params(config, seed=0))
    _, first = nanoformer.tf_forward(params, (1, 2, 3, 4, 5))
    _, second = nanoformer.tf_forward(params, (1, 2, 3, 9, 10))
    assert np.allclose(first.states[:, :, :3], second.states[:, :, :3], atol=0)
    assert not np.allclose(first.states[:, :, 3], second.states[:, :, 3])


def test_positions_matter(dataset_id, tiny_tf_config):
    params = perturbed(init_tf_params(tiny_tf_config, seed=0))
    a, r = dataset_id.train[0].tokens
    assert not np.allclose(
        nanoformer.tf_forward(params, (a, r))[0],
        nanoformer.tf_forward(params, (r, a))[0],
    )


def test_forward_errors(tiny_tf_params):
    with pytest.raises(SequenceTooLong):
        nanoformer.tf_forward(tiny_tf_params, (0, 1, 2, 3))
    with pytest.raises(UnknownToken):
        nanoformer.tf_forward(tiny_tf_params, (tiny_tf_params.config.d_vocab,))


def test_empty_batch_rejected(tiny_tf_params):
    with pytest.raises(InvalidConfig):
        nanoformer.tf_loss_and_grads(tiny_tf_params, [])


def test_extract_hidden(tiny_tf_params, dataset_id):
    tokens = dataset_id.train[0].tokens
    states = nanoformer.extract_hidden(tiny_tf_params, tokens)
    config = tiny_tf_params.config
    assert states.shape == (config.n_layers + 1, config.d_m)
    assert np.array_equal(states, nanoformer.extract_hidden(tiny_tf_params, tokens))


def test_batch_logits_match_single(tiny_tf_params, dataset_id):
    examples = dataset_id.train[:3] + dataset_id.test_ood[:2] + dataset_id.train[-2:]
    batch = nanoformer.batch_logits(tiny_tf_params, examples)
    for row, ex in zip(batch, examples):
        assert np.allclose(row, nanoformer.tf_forward(tiny_tf_params, ex.tokens)[0])


def _numeric(loss, array, h=1e-5):
    grad = np.zeros_like(array)
    for idx in np.ndindex(*array.shape):
        saved = array[idx]
        array[idx] = saved + h
        plus = loss()
        array[idx] = saved - h
        minus = loss()
        array[idx] = saved
        grad[idx] = (plus - minus) / (2 * h)
    return grad


@pytest.mark.parametrize("tie", [True, False])
def test_gradients_match_finite_differences(dataset_id, tie):
    config = TransformerConfig(
        d_vocab=dataset_id.layout.vocab_size,
        d_m=8,
        d_k=8,
        n_heads=1,
        n_layers=1,
        tie_embeddings=tie,
    )
    params = perturbed(init_tf_params(config, seed=1), seed=2)
    batch = dataset_id.train[::3] + dataset_id.test_ood[:3]
    assert {len(ex.tokens) for ex in batch} == {1, 2, 3}

    def loss():
        return nanoformer.tf_loss_and_grads(params, batch, 0.05)[0]

    _, grads = nanoformer.tf_loss_and_grads(params, batch, 0.05)
    for name, tensor in params.tensors.items():
        numeric = _numeric(loss, tensor)
        error = np.linalg.norm(grads[name] - numeric) / max(
            np.linalg.norm(grads[name]) + np.linalg.norm(numeric), 1e-5
        )
        assert error <= 1e-4, name


def test_identical_examples_average(tiny_tf_config, dataset_id):
    params = perturbed(init_tf_params(tiny_tf_config, seed=0))
    ex = dataset_id.test_ood[0]
    loss_one, one = nanoformer.tf_loss_and_grads(params, [ex])
    loss_four, four = nanoformer.tf_loss_and_grads(params, [ex] * 4)
    assert loss_four == pytest.approx(loss_one)
    for name in one:
        assert np.allclose(one[name], four[name], atol=1e-12)


def test_weight_decay_gradient(tiny_tf_config, dataset_id):
    params = perturbed(init_tf_params(tiny_tf_config, seed=0))
    _, plain = nanoformer.tf_loss_and_grads(params, dataset_id.train)
    _, decay = nanoformer.tf_loss_and_grads(params, dataset_id.train, 0.2)
    for name, tensor in params.tensors.items():
        expected = 0.2 * tensor if decayed(name) else 0.0
        assert np.allclose(decay[name] - plain[name], expected, atol=1e-12), name


def test_train_zero_steps(dataset_id, tiny_tf_config):
    train_config = TrainConfig.for_transformer(max_steps=0, seed=4)
    params, trace = nanoformer.tf_train(dataset_id, tiny_tf_config, train_config)
    initial = init_tf_params(tiny_tf_config, seed=4)
    assert len(trace) == 1
    assert trace.final.alignment is not None
    for name, tensor in initial.tensors.items():
        assert np.array_equal(params[name], tensor)


def test_train_deterministic(dataset_id, tiny_tf_config):
    train_config = TrainConfig.for_transformer(max_steps=6, log_every=2, seed=1)
    first, trace = nanoformer.tf_train(dataset_id, tiny_tf_config, train_config)
    second, again = nanoformer.tf_train(dataset_id, tiny_tf_config, train_config)
    assert trace == again
    assert [row.step for row in trace] == [0, 2, 4, 6]
    assert np.array_equal(first["tok_emb"], second["tok_emb"])


def test_default_decay_shrinks_unreached_position(dataset_id, tiny_tf_config):
    assert max(len(ex.tokens) for ex in dataset_id.train) < tiny_tf_config.context
    train_config = TrainConfig.for_transformer(max_steps=200, seed=2)
    params, _ = nanoformer.tf_train(dataset_id, tiny_tf_config, train_config)
    initial = init_tf_params(tiny_tf_config, seed=2)
    last = tiny_tf_config.context - 1
    before = np.linalg.norm(initial["pos_emb"][last])
    assert np.linalg.norm(params["pos_emb"][last]) < 0.5 * before


def test_train_rejects_wrong_vocabulary(dataset_id):
    config = TransformerConfig(d_vocab=dataset_id.layout.vocab_size + 1, d_m=8, d_k=4)
    with pytest.raises(InvalidConfig):
        nanoformer.tf_train(dataset_id, config, TrainConfig.for_transformer())


def test_first_hop_pairs(dataset_id):
    pairs = nanoformer.first_hop_pairs(dataset_id)
    layout = dataset_id.layout
    assert len(pairs) == layout.n
    assert pairs[0] == ((layout.subjects[0], layout.rel1[0]), layout.bridges[0])


def test_hidden_alignment_shape(tiny_tf_params, dataset_id):
    pairs = nanoformer.first_hop_pairs(dataset_id)
    cosines = nanoformer.hidden_alignment(tiny_tf_params, pairs)
    assert cosines.shape == (len(pairs), tiny_tf_params.config.n_layers + 1)
    assert np.all(np.abs(cosines) <= 1.0 + 1e-12)


def test_hidden_alignment_centering(tiny_tf_params, dataset_id):
    b0, b1 = dataset_id.layout.bridges[:2]
    matched = nanoformer.hidden_alignment(tiny_tf_params, [((b0,), b0), ((b1,), b1)])
    assert np.allclose(matched, 1.0)
    swapped = [((b0,), b1), ((b1,), b0)]
    assert np.allclose(nanoformer.hidden_alignment(tiny_tf_params, swapped), -1.0)
    raw = nanoformer.hidden_alignment(tiny_tf_params, swapped, center=False)
    assert np.all(raw > -1.0 + 1e-6)


def test_hidden_csv(tiny_tf_params, dataset_id):
    tokens = dataset_id.test_ood[0].tokens
    lines = nanoformer.hidden_csv(tiny_tf_params, tokens).splitlines()
    config = tiny_tf_params.config
    assert lines[0] == "layer,position,dim,value"
    assert len(lines) == 1 + (config.n_layers + 1) * len(tokens) * config.d_m


@pytest.mark.slow
def test_standard_init_composes_with_identity():
    dataset = generate(DatasetSpec(n_entities=20))
    config = nanoformer.default_config(dataset)
    _, trace = nanoformer.tf_train(dataset, config, TrainConfig.for_transformer())
    assert trace.final.train_acc == 1.0
    assert trace.final.ood_acc > 0.0
