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
Diagnostics that connect trained models to the restricted-form theory:
margins, OOD accuracy, block fits of logit matrices, logit-template
patterns and hidden-state alignment.
"""
from __future__ import annotations

import csv
import io
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, NamedTuple, Sequence, Union

import numpy as np

from .exceptions import InvalidConfig, ShapeMismatch
from .models import embmlp, nanoformer
from .models.embmlp import EmbMlpParams
from .models.margin import MarginReport, margin_report, row_sum_logits
from .models.nanoformer import TransformerParams
from .models.taskgen import (
    Dataset,
    DatasetSpec,
    Example,
    VocabLayout,
    g2,
    vocab_labels,
)
from .theory.restricted import assemble_blocks
from .utils import make_rng, stable_json, write_text

_LOGGER = logging.getLogger(__name__)

PATTERN_TOL = 1e-9


class LogitProvider(ABC):
    """Anything that maps a token sequence to logits over ``vocab``."""

    vocab: tuple[int, ...]

    @abstractmethod
    def logits(self, tokens: Sequence[int]) -> np.ndarray:
        pass

    def batch_logits(self, examples: Sequence[Example]) -> np.ndarray:
        if not examples:
            return np.zeros((0, len(self.vocab)))
        return np.array([self.logits(ex.tokens) for ex in examples])

    def report(self, query: Example) -> MarginReport:
        return margin_report(query, self.logits(query.tokens), self.vocab)


class EmbMlpProvider(LogitProvider):
    def __init__(self, params: EmbMlpParams) -> None:
        self.params = params
        self.vocab = tuple(params.out_vocab)

    def logits(self, tokens):
        return embmlp.forward(self.params, tokens)

    def batch_logits(self, examples):
        return embmlp.batch_logits(self.params, examples)


class MatrixProvider(LogitProvider):
    """A bare logit matrix; a sequence scores the sum of its tokens' rows."""

    def __init__(
        self, W: np.ndarray, in_vocab: Sequence[int], out_vocab: Sequence[int]
    ) -> None:
        W = np.asarray(W, dtype=float)
        if W.shape != (len(in_vocab), len(out_vocab)):
            raise ShapeMismatch(
                f"Matrix of shape {W.shape} does not fit vocabularies of size "
                f"{len(in_vocab)} and {len(out_vocab)}"
            )
        self.W = W
        self.in_vocab = tuple(in_vocab)
        self.vocab = tuple(out_vocab)

    @classmethod
    def from_layout(cls, W: np.ndarray, layout: VocabLayout) -> MatrixProvider:
        return cls(W, layout.in_vocab, layout.out_vocab)

    def logits(self, tokens):
        return row_sum_logits(self.W, tokens, self.in_vocab)


class TransformerProvider(LogitProvider):
    """Last-position logits over the full vocabulary."""

    def __init__(self, params: TransformerParams) -> None:
        self.params = params
        self.vocab = tuple(range(params.config.d_vocab))

    def logits(self, tokens):
        return nanoformer.tf_forward(self.params, tokens)[0]

    def batch_logits(self, examples):
        return nanoformer.batch_logits(self.params, examples)


Model = Union[LogitProvider, EmbMlpParams, TransformerParams, np.ndarray]


def as_provider(model: Model, layout: VocabLayout | None = None) -> LogitProvider:
    """
    Wrap parameters or a logit matrix as a provider. Bare matrices need the
    layout whose Emb-MLP vocabularies index their rows and columns.
    """
    if isinstance(model, LogitProvider):
        return model
    if isinstance(model, EmbMlpParams):
        return EmbMlpProvider(model)
    if isinstance(model, TransformerParams):
        return TransformerProvider(model)
    if isinstance(model, np.ndarray):
        if layout is None:
            raise InvalidConfig("A logit matrix needs a vocabulary layout")
        return MatrixProvider.from_layout(model, layout)
    raise TypeError(f"Cannot compute logits from {type(model).__name__}")


def margins(
    model: Model, queries: Sequence[Example], layout: VocabLayout | None = None
) -> list[MarginReport]:
    """
    Gaps and multiclass margin of every query over all competitors.

    :raises UnknownToken: If a query uses a token outside the model's vocabularies.
    """
    provider = as_provider(model, layout)
    return [provider.report(query) for query in queries]


def ood_accuracy(model: Model, dataset: Dataset) -> float:
    """Fraction of OOD queries whose argmax (ties to the lowest id) is the label."""
    if not dataset.test_ood:
        return 0.0
    provider = as_provider(model, dataset.layout)
    logits = provider.batch_logits(dataset.test_ood)
    predicted = np.array(provider.vocab)[np.argmax(logits, axis=1)]
    targets = np.array([ex.target for ex in dataset.test_ood])
    return float(np.mean(predicted == targets))


class BlockFit(NamedTuple):
    """Least-squares restricted-form parameters of a logit matrix."""

    params: dict[str, float]
    residual: float
    with_identity: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            "params": dict(self.params),
            "residual": self.residual,
            "with_identity": self.with_identity,
        }


def _orient(W: np.ndarray, n: int) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.shape == (2 * n + 2, 2 * n):
        return W
    if W.shape == (2 * n, 2 * n + 2):
        return W.T
    raise ShapeMismatch(
        f"Matrix of shape {W.shape} is not {(2 * n + 2, 2 * n)} or its transpose"
    )


def _diag_off(block: np.ndarray) -> tuple[float, float]:
    """Means of the diagonal and of the off-diagonal entries."""
    n = block.shape[0]
    diag = float(np.trace(block)) / n
    off = (float(block.sum()) - diag * n) / (n * n - n)
    return diag, off


def _identity_ones(block: np.ndarray) -> tuple[float, float]:
    """Least-squares (x1, x2) for x1 I + x2 E."""
    diag, off = _diag_off(block)
    return diag - off, off


def fit_blocks(W: np.ndarray, n: int, with_identity: bool) -> BlockFit:
    """
    Project a logit matrix onto the restricted-form template.

    :param W: (2n+2) x 2n matrix, or its transpose.
    :param n: Number of entities per block.
    :param with_identity: Fit the with-identity template (a1..h) rather than
        the symmetric one (a1, a2, b1, b2, alpha, beta).
    :returns: Parameters and ``||W - template||_F / ||W||_F``.
    :raises ShapeMismatch: If W has neither orientation.
    """
    if n < 2:
        raise ShapeMismatch(f"Blocks need n >= 2, got {n}")
    W = _orient(W, n)
    bridges, objects = slice(0, n), slice(n, 2 * n)
    subj_rows, bridge_rows = slice(0, n), slice(n, 2 * n)
    r1, r2 = W[2 * n], W[2 * n + 1]

    if with_identity:
        a1, a2 = _identity_ones(W[subj_rows, bridges])
        c1, c2 = _identity_ones(W[subj_rows, objects])
        b1, b2 = _identity_ones(W[bridge_rows, bridges])
        d1, d2 = _identity_ones(W[bridge_rows, objects])
        e, g = float(r1[bridges].mean()), float(r1[objects].mean())
        f, h = float(r2[bridges].mean()), float(r2[objects].mean())
        params = dict(a1=a1, a2=a2, b1=b1, b2=b2, c1=c1, c2=c2, d1=d1, d2=d2,
                      e=e, f=f, g=g, h=h)
        template = assemble_blocks(n, (a1, a2), (c1, c2), (b1, b2), (d1, d2),
                                   (e, g), (f, h))
    else:
        a_diag = np.mean(
            [_diag_off(W[subj_rows, bridges]), _diag_off(W[bridge_rows, objects])],
            axis=0,
        )
        b_diag = np.mean(
            [_diag_off(W[subj_rows, objects]), _diag_off(W[bridge_rows, bridges])],
            axis=0,
        )
        a1, a2 = float(a_diag[0] - a_diag[1]), float(a_diag[1])
        b1, b2 = float(b_diag[0] - b_diag[1]), float(b_diag[1])
        alpha = float((r1[bridges].mean() + r2[objects].mean()) / 2)
        beta = float((r1[objects].mean() + r2[bridges].mean()) / 2)
        params = dict(a1=a1, a2=a2, b1=b1, b2=b2, alpha=alpha, beta=beta)
        template = assemble_blocks(n, (a1, a2), (b1, b2), (b1, b2), (a1, a2),
                                   (alpha, beta), (beta, alpha))

    norm = float(np.linalg.norm(W))
    residual = float(np.linalg.norm(W - template)) / norm if norm > 0 else 0.0
    return BlockFit(params, residual, with_identity)


class PatternFlags(NamedTuple):
    """
    Qualitative shape of a logit matrix.

    ``relations_select``: every r1 row favors bridges over objects on average
    and the r2 row the converse. ``bridges_self_peaked``: every bridge row
    peaks on itself within the bridge block. ``bridges_object_aligned``: every
    bridge row peaks on its paired object within the object block, and that
    object and the bridge itself are the row's two largest entries.
    """

    relations_select: bool
    bridges_self_peaked: bool
    bridges_object_aligned: bool
    self_peaked_count: int
    object_aligned_count: int

    def as_dict(self) -> dict[str, Any]:
        return self._asdict()


def _strict_argmax(values: np.ndarray, expected: int) -> bool:
    others = np.delete(values, expected)
    return bool(values[expected] > others.max() + PATTERN_TOL) if others.size else True


def template_pattern_check(W: np.ndarray, layout: VocabLayout) -> PatternFlags:
    """
    Check the set-selection and bridge-peak patterns of an Emb-MLP logit matrix.

    :raises ShapeMismatch: If W does not span the layout's vocabularies.
    """
    W = np.asarray(W, dtype=float)
    n_in, n_out = len(layout.in_vocab), len(layout.out_vocab)
    if W.shape != (n_in, n_out):
        raise ShapeMismatch(f"Matrix of shape {W.shape} does not fit {(n_in, n_out)}")
    rows, cols = layout.in_index(), layout.out_index()
    bridge_cols = [cols[t] for t in layout.bridges]
    object_cols = [cols[t] for t in layout.objects]
    spec = DatasetSpec(n_entities=layout.n, complexity=layout.c)

    selects = all(
        W[rows[r], bridge_cols].mean() > W[rows[r], object_cols].mean() + PATTERN_TOL
        for r in layout.rel1
    )
    r2 = rows[layout.rel2[0]]
    selects = selects and bool(
        W[r2, object_cols].mean() > W[r2, bridge_cols].mean() + PATTERN_TOL
    )

    self_peaked = aligned = 0
    for k, bridge in enumerate(layout.bridges, start=1):
        row = W[rows[bridge]]
        own = bridge_cols.index(cols[bridge])
        paired = object_cols.index(cols[layout.objects[g2(k, spec) - 1]])
        peak = _strict_argmax(row[bridge_cols], own)
        self_peaked += peak
        if _strict_argmax(row[object_cols], paired):
            top_two = {cols[bridge], object_cols[paired]}
            ranked = np.sort(row)[::-1]
            separated = ranked.size < 3 or ranked[1] > ranked[2] + PATTERN_TOL
            aligned += bool(
                separated and set(np.argsort(-row, kind="stable")[:2]) == top_two
            )
    n_bridges = len(layout.bridges)
    return PatternFlags(
        relations_select=bool(selects),
        bridges_self_peaked=self_peaked == n_bridges,
        bridges_object_aligned=aligned == n_bridges,
        self_peaked_count=int(self_peaked),
        object_aligned_count=int(aligned),
    )


class AlignmentScore(NamedTuple):
    """
    Cosine similarity between the last-position state of a first-hop input
    (e1, r) and the state of its bridge token alone, per layer boundary.
    With two or more pairs both sides are centered over the pairs first.
    """

    pairs: tuple[tuple[tuple[int, ...], int], ...]
    cosines: np.ndarray

    @property
    def per_layer(self) -> tuple[float, ...]:
        """Mean over pairs, one value per layer boundary."""
        return tuple(float(v) for v in self.cosines.mean(axis=0))

    @property
    def aggregate(self) -> float:
        """Mean over pairs at the last layer."""
        return self.per_layer[-1]


def alignment_of_pairs(
    params: TransformerParams, pairs: Sequence[tuple[Sequence[int], int]]
) -> AlignmentScore:
    """:raises UnknownToken: If a token is outside the model's vocabulary."""
    if not pairs:
        raise InvalidConfig("Alignment needs at least one pair")
    fixed = tuple((tuple(tokens), int(bridge)) for tokens, bridge in pairs)
    return AlignmentScore(fixed, nanoformer.hidden_alignment(params, fixed))


def alignment(
    params: TransformerParams, dataset: Dataset, sample_count: int, seed: int = 0
) -> AlignmentScore:
    """
    Alignment over a seeded sample of the dataset's first-hop facts.

    :param sample_count: Pairs to sample, 1..C*N.
    :raises InvalidConfig: If sample_count is out of range.
    """
    pairs = nanoformer.first_hop_pairs(dataset)
    if not 1 <= sample_count <= len(pairs):
        raise InvalidConfig(
            f"sample_count must lie in 1..{len(pairs)}, got {sample_count}"
        )
    rng = make_rng(seed)
    chosen = sorted(rng.choice(len(pairs), size=sample_count, replace=False))
    score = alignment_of_pairs(params, [pairs[i] for i in chosen])
    _LOGGER.info(f"Alignment over {sample_count} pairs: {score.per_layer}")
    return score


# -- emitters ---------------------------------------------------------------


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_logits_csv(W: np.ndarray, layout: VocabLayout, path: Path | str) -> Path:
    """The full logit matrix with token labels on both axes."""
    labels = vocab_labels(layout)
    header = ["token"] + [labels[t] for t in layout.out_vocab]
    rows = [
        [labels[token]] + [repr(float(v)) for v in W[pos]]
        for pos, token in enumerate(layout.in_vocab)
    ]
    return write_text(path, _csv_text(header, rows))


def write_margins_csv(
    reports: Sequence[MarginReport], layout: VocabLayout, path: Path | str
) -> Path:
    labels = vocab_labels(layout)
    rows = [
        [
            " ".join(labels.get(t, str(t)) for t in r.query.tokens),
            labels.get(r.query.target, str(r.query.target)),
            labels.get(r.predicted, str(r.predicted)),
            repr(r.q),
            str(r.correct).lower(),
        ]
        for r in reports
    ]
    return write_text(
        path, _csv_text(("query", "target", "predicted", "q", "correct"), rows)
    )


def write_alignment_csv(score: AlignmentScore, path: Path | str) -> Path:
    rows = [
        [layer, pair, repr(float(score.cosines[pair, layer]))]
        for layer in range(score.cosines.shape[1])
        for pair in range(score.cosines.shape[0])
    ]
    return write_text(path, _csv_text(("layer", "pair", "cosine"), rows))


def write_patterns_json(
    flags: PatternFlags, path: Path | str, fit: BlockFit | None = None
) -> Path:
    payload: dict[str, Any] = {"patterns": flags.as_dict()}
    if fit is not None:
        payload["block_fit"] = fit.as_dict()
    return write_text(path, stable_json(payload))
