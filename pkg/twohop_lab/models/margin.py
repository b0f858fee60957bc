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
"""Logit gaps and multiclass margins of single queries."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from ..exceptions import UnknownToken
from ..utils import argmax_lowest
from .taskgen import Example


class MarginReport(NamedTuple):
    """
    Gap ``s = logit[target] - logit[competitor]`` for every competitor of one
    query, the margin ``q = min s`` and the argmax prediction.
    """

    query: Example
    gaps: dict[int, float]
    q: float
    predicted: int
    correct: bool

    @classmethod
    def from_gaps(cls, query: Example, gaps: dict[int, float]) -> MarginReport:
        """
        Build a report from gaps alone. The prediction is the target unless
        some competitor scores higher, or ties with it at a lower id.
        """
        q = min(gaps.values())
        predicted = query.target
        if q <= 0:
            contenders = [tok for tok, gap in gaps.items() if gap == q]
            if q < 0:
                predicted = min(contenders)
            else:
                predicted = min(contenders + [query.target])
        return cls(query, dict(gaps), float(q), predicted, predicted == query.target)

    def as_dict(self) -> dict:
        return {
            "tokens": list(self.query.tokens),
            "target": self.query.target,
            "q": self.q,
            "predicted": self.predicted,
            "correct": self.correct,
        }


def margin_report(
    query: Example, logits: np.ndarray, vocab: Sequence[int]
) -> MarginReport:
    """
    :param query: The query with its target token.
    :param logits: One logit per entry of ``vocab``.
    :param vocab: Ascending token ids the logits stand for.
    :raises UnknownToken: If the target is not in ``vocab``.
    """
    vocab = list(vocab)
    try:
        target_pos = vocab.index(query.target)
    except ValueError:
        raise UnknownToken(f"Target {query.target} is not in the output vocabulary")
    target_logit = float(logits[target_pos])
    gaps = {
        token: target_logit - float(logits[pos])
        for pos, token in enumerate(vocab)
        if pos != target_pos
    }
    q = min(gaps.values())
    predicted = vocab[argmax_lowest(logits)]
    return MarginReport(query, gaps, float(q), predicted, predicted == query.target)


def row_sum_logits(
    W: np.ndarray, tokens: Sequence[int], in_vocab: Sequence[int]
) -> np.ndarray:
    """Logits of a token sequence under a logit matrix: the sum of its rows."""
    index = {token: pos for pos, token in enumerate(in_vocab)}
    logits = np.zeros(W.shape[1])
    for token in tokens:
        try:
            logits = logits + W[index[token]]
        except KeyError:
            raise UnknownToken(f"Token {token} is not in the input vocabulary")
    return logits
