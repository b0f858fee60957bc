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
Embedding-MLP model: the logits of a token sequence are the summed input
embeddings times a projection, ``(sum_t E[s_t]) @ W_proj``.
"""
from __future__ import annotations

import logging
from typing import NamedTuple, Sequence

import numpy as np

from ..exceptions import InvalidConfig, NumericalOverflow, ShapeMismatch, UnknownToken
from ..utils import check_finite, make_rng, timed
from .taskgen import Dataset, Example, VocabLayout
from .training import StopRule, TraceRow, TrainConfig, TrainTrace, make_optimizer

_LOGGER = logging.getLogger(__name__)

WIDTH_FLOOR = 512


class EmbMlpParams(NamedTuple):
    """
    Embedding matrix ``E`` (|V_in| x d_m) and projection ``W_proj``
    (d_m x |V_out|), with the token ids their rows and columns stand for.
    """

    E: np.ndarray
    W_proj: np.ndarray
    in_vocab: tuple[int, ...]
    out_vocab: tuple[int, ...]

    @property
    def d_m(self) -> int:
        return self.E.shape[1]

    @classmethod
    def from_arrays(
        cls, E: np.ndarray, W_proj: np.ndarray, layout: VocabLayout
    ) -> EmbMlpParams:
        """
        :raises ShapeMismatch: If the arrays do not fit the layout's vocabularies.
        """
        E = np.asarray(E, dtype=np.float64)
        W_proj = np.asarray(W_proj, dtype=np.float64)
        expected_in, expected_out = len(layout.in_vocab), len(layout.out_vocab)
        if (
            E.ndim != 2
            or W_proj.ndim != 2
            or E.shape[0] != expected_in
            or W_proj.shape[1] != expected_out
            or E.shape[1] != W_proj.shape[0]
        ):
            raise ShapeMismatch(
                f"Parameters {E.shape} x {W_proj.shape} do not fit vocabularies "
                f"of size {expected_in} and {expected_out}"
            )
        return cls(E, W_proj, layout.in_vocab, layout.out_vocab)

    def copy(self) -> EmbMlpParams:
        return self._replace(E=self.E.copy(), W_proj=self.W_proj.copy())


def default_width(layout: VocabLayout) -> int:
    """
    Embedding width that leaves the logit matrix unconstrained in rank.

    Never below ``WIDTH_FLOOR``: the random Gram matrix of a narrow
    embedding carries 1/sqrt(d_m) fluctuations that plain gradient descent
    freezes into the fitted logits once the train set is separated.
    """
    return max(min(len(layout.in_vocab), len(layout.out_vocab)), WIDTH_FLOOR)


def init_params(
    layout: VocabLayout, d_m: int, config: TrainConfig, seed: int
) -> EmbMlpParams:
    """
    Draw every entry i.i.d. from a centered Gaussian.

    :param layout: The vocabulary layout.
    :param d_m: Embedding width, at least 2.
    :param config: Supplies the init policy.
    :param seed: Seed for the generator.
    :returns: Fresh parameters.
    :raises InvalidConfig: On a width below 2 or an invalid init policy.
    """
    config.validate()
    if d_m < 2:
        raise InvalidConfig(f"Embedding width must be at least 2, got {d_m}")
    rng = make_rng(seed)
    n_in, n_out = len(layout.in_vocab), len(layout.out_vocab)
    E = rng.normal(0.0, config.sigma(n_in), size=(n_in, d_m))
    W_proj = rng.normal(0.0, config.sigma(d_m), size=(d_m, n_out))
    return EmbMlpParams(E, W_proj, layout.in_vocab, layout.out_vocab)


def _count_matrix(
    params: EmbMlpParams, sequences: Sequence[Sequence[int]]
) -> np.ndarray:
    index = {token: pos for pos, token in enumerate(params.in_vocab)}
    counts = np.zeros((len(sequences), len(params.in_vocab)))
    for row, tokens in enumerate(sequences):
        for token in tokens:
            try:
                counts[row, index[token]] += 1.0
            except KeyError:
                raise UnknownToken(f"Token {token} is not in the input vocabulary")
    return counts


def _target_positions(params: EmbMlpParams, batch: Sequence[Example]) -> np.ndarray:
    index = {token: pos for pos, token in enumerate(params.out_vocab)}
    try:
        return np.array([index[ex.target] for ex in batch], dtype=np.intp)
    except KeyError as exc:
        raise UnknownToken(f"Target {exc.args[0]} is not in the output vocabulary")


def forward(params: EmbMlpParams, tokens: Sequence[int]) -> np.ndarray:
    """
    Logits over the output vocabulary for one token sequence.

    :raises UnknownToken: If a token is not in the input vocabulary.
    """
    counts = _count_matrix(params, [tokens])
    return (counts @ params.E @ params.W_proj)[0]


def batch_logits(params: EmbMlpParams, batch: Sequence[Example]) -> np.ndarray:
    counts = _count_matrix(params, [ex.tokens for ex in batch])
    return counts @ params.E @ params.W_proj


def logit_matrix(params: EmbMlpParams) -> np.ndarray:
    """``W = E @ W_proj``; row i is the logit template of input token i."""
    return params.E @ params.W_proj


def _softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(len(targets))
    loss = -float(log_probs[rows, targets].mean())
    if not np.isfinite(loss):
        raise NumericalOverflow()
    grad = exp / total
    grad[rows, targets] -= 1.0
    grad /= len(targets)
    return loss, grad


def loss_and_grads(
    params: EmbMlpParams, batch: Sequence[Example], weight_decay: float = 0.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Mean softmax cross-entropy plus ``weight_decay / 2`` times the squared
    Frobenius norms, with its exact gradients.

    :param params: Model parameters.
    :param batch: Non-empty list of examples.
    :param weight_decay: Nonnegative decay coefficient.
    :returns: (loss, dE, dW_proj).
    :raises NumericalOverflow: If the loss is not finite.
    :raises InvalidConfig: On an empty batch.
    """
    if not batch:
        raise InvalidConfig("Batch must not be empty")
    counts = _count_matrix(params, [ex.tokens for ex in batch])
    targets = _target_positions(params, batch)
    loss, d_E, d_W, _ = _objective(params, counts, targets, weight_decay)
    return loss, d_E, d_W


def _objective(
    params: EmbMlpParams, counts: np.ndarray, targets: np.ndarray, weight_decay: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    hidden = counts @ params.E
    logits = hidden @ params.W_proj
    loss, d_logits = _softmax_cross_entropy(logits, targets)

    d_W = hidden.T @ d_logits
    d_E = counts.T @ (d_logits @ params.W_proj.T)
    if weight_decay:
        loss += 0.5 * weight_decay * (
            float(np.sum(params.E**2)) + float(np.sum(params.W_proj**2))
        )
        d_E = d_E + weight_decay * params.E
        d_W = d_W + weight_decay * params.W_proj
    return loss, d_E, d_W, logits


def accuracy(params: EmbMlpParams, examples: Sequence[Example]) -> float:
    """Fraction of examples whose argmax (ties to the lowest id) is the target."""
    if not examples:
        return 0.0
    logits = batch_logits(params, examples)
    targets = _target_positions(params, examples)
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def min_margin(params: EmbMlpParams, examples: Sequence[Example]) -> float:
    """Smallest multiclass margin over the examples (nan when there are none)."""
    if not examples:
        return float("nan")
    logits = batch_logits(params, examples)
    targets = _target_positions(params, examples)
    rows = np.arange(len(examples))
    correct = logits[rows, targets].copy()
    logits[rows, targets] = -np.inf
    return float(np.min(correct - logits.max(axis=1)))


@timed
def train(
    dataset: Dataset, config: TrainConfig, d_m: int | None = None
) -> tuple[EmbMlpParams, TrainTrace]:
    """
    Full-batch training on ``dataset.train``.

    :param dataset: The dataset; OOD queries are only evaluated.
    :param config: Optimization settings.
    :param d_m: Embedding width; defaults to :func:`default_width`.
    :returns: Final parameters and the logged trace.
    :raises Diverged: If the loss becomes non-finite.
    :raises InvalidConfig: If the dataset has no training rows.
    """
    config.validate()
    if not dataset.train:
        raise InvalidConfig("Dataset has no training rows")
    layout = dataset.layout
    params = init_params(layout, d_m or default_width(layout), config, config.seed)
    tensors = {"E": params.E, "W_proj": params.W_proj}
    optimizer = make_optimizer(config)
    stop = StopRule(config)
    trace = TrainTrace()

    counts = _count_matrix(params, [ex.tokens for ex in dataset.train])
    targets = _target_positions(params, dataset.train)

    step = 0
    while True:
        try:
            loss, d_E, d_W, logits = _objective(
                params, counts, targets, config.weight_decay
            )
        except NumericalOverflow:
            loss = float("nan")
        check_finite(loss, step)
        train_acc = float(np.mean(np.argmax(logits, axis=1) == targets))
        finished = stop.done(step, loss, train_acc)
        if finished or step % config.log_every == 0:
            row = TraceRow(
                step,
                loss,
                train_acc,
                accuracy(params, dataset.test_ood),
                min_margin(params, dataset.test_ood),
            )
            trace.append(row)
            _LOGGER.debug(f"step {step}: {row}")
        if finished:
            break
        optimizer.step(tensors, {"E": d_E, "W_proj": d_W})
        step += 1

    final = trace.final
    _LOGGER.info(
        f"Emb-MLP trained {step} steps: loss {final.loss:.3g}, "
        f"train acc {final.train_acc:.3f}, OOD acc {final.ood_acc:.3f}"
    )
    return params, trace
