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
Synthetic two-hop task family: entity/relation vocabulary, hop maps and
train / out-of-distribution splits.

Token ids are assigned in the order subjects, bridge slices, objects,
first-hop relations, second-hop relation.
"""
from __future__ import annotations

import json
import logging
from enum import Enum
from functools import cached_property
from typing import Any, NamedTuple

from ..exceptions import CorruptFile, IndexOutOfRange, InvalidSpec
from ..utils import make_rng, stable_json

_LOGGER = logging.getLogger(__name__)


class ExampleKind(str, Enum):
    ZERO_HOP = "ZeroHop"
    ONE_HOP_FIRST = "OneHopFirst"
    ONE_HOP_SECOND = "OneHopSecond"
    TWO_HOP = "TwoHop"


class DatasetSpec(NamedTuple):
    """Parameters of one member of the task family."""

    n_entities: int
    complexity: int = 1
    include_identity: bool = True
    include_two_hop_in_train: bool = False
    seed: int = 0
    two_hop_fraction: float = 0.5

    def validate(self) -> DatasetSpec:
        """
        :returns: self, for chaining.
        :raises InvalidSpec: When N < 2, C < 1 or the two-hop fraction is not
            in (0, 1).
        """
        if int(self.n_entities) != self.n_entities or self.n_entities < 2:
            raise InvalidSpec(f"n_entities must be >= 2, got {self.n_entities}")
        if int(self.complexity) != self.complexity or self.complexity < 1:
            raise InvalidSpec(f"complexity must be >= 1, got {self.complexity}")
        if not 0.0 < self.two_hop_fraction < 1.0:
            raise InvalidSpec(
                f"two_hop_fraction must lie in (0, 1), got {self.two_hop_fraction}"
            )
        if self.seed < 0 or self.seed >= 2**64:
            raise InvalidSpec(f"seed must be an unsigned 64-bit integer: {self.seed}")
        return self


class VocabLayout(NamedTuple):
    subjects: tuple[int, ...]
    bridges: tuple[int, ...]
    objects: tuple[int, ...]
    rel1: tuple[int, ...]
    rel2: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def c(self) -> int:
        return len(self.rel1)

    @property
    def vocab_size(self) -> int:
        return len(self.subjects) + len(self.bridges) + len(self.objects) + len(
            self.rel1
        ) + len(self.rel2)

    @property
    def in_vocab(self) -> tuple[int, ...]:
        """Input vocabulary of the embedding model: E1, E2, R1, R2."""
        return self.subjects + self.bridges + self.rel1 + self.rel2

    @property
    def out_vocab(self) -> tuple[int, ...]:
        """Output vocabulary of the embedding model: E2, E3."""
        return self.bridges + self.objects

    def bridge_slice(self, j: int) -> tuple[int, ...]:
        """Token ids of the bridge slice reached through relation j (1-based)."""
        if not 1 <= j <= self.c:
            raise IndexOutOfRange(f"Relation index {j} outside 1..{self.c}")
        return self.bridges[(j - 1) * self.n : j * self.n]

    def in_index(self) -> dict[int, int]:
        return {token: pos for pos, token in enumerate(self.in_vocab)}

    def out_index(self) -> dict[int, int]:
        return {token: pos for pos, token in enumerate(self.out_vocab)}


class Example(NamedTuple):
    tokens: tuple[int, ...]
    target: int
    kind: ExampleKind


class Dataset:
    """Train rows and OOD two-hop queries for one spec."""

    def __init__(
        self,
        spec: DatasetSpec,
        layout: VocabLayout,
        train: list[Example],
        test_ood: list[Example],
    ) -> None:
        self.spec = spec
        self.layout = layout
        self.train = train
        self.test_ood = test_ood

    def __repr__(self):
        return "{}(N={}, C={}, identity={}, train={}, test_ood={})".format(
            self.__class__.__name__,
            self.spec.n_entities,
            self.spec.complexity,
            self.spec.include_identity,
            len(self.train),
            len(self.test_ood),
        )

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.as_dict() == other.as_dict()

    @cached_property
    def latent_bridges(self) -> dict[tuple[int, ...], int]:
        """Bridge token of every two-hop query, keyed by its tokens."""
        first = _first_hop_table(self.layout)
        return {
            ex.tokens: first[ex.tokens[:2]]
            for ex in self.train + self.test_ood
            if ex.kind is ExampleKind.TWO_HOP
        }

    def as_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec._asdict(),
            "layout": {k: list(v) for k, v in self.layout._asdict().items()},
            "train": [_example_as_dict(ex) for ex in self.train],
            "test_ood": [_example_as_dict(ex) for ex in self.test_ood],
        }


def _example_as_dict(example: Example) -> dict[str, Any]:
    return {
        "tokens": list(example.tokens),
        "target": example.target,
        "kind": example.kind.value,
    }


def build_layout(spec: DatasetSpec) -> VocabLayout:
    """
    Assign contiguous token ids for a spec.

    :param spec: The dataset spec.
    :returns: The layout; equal specs give identical ids.
    :raises InvalidSpec: When N < 2 or C < 1.
    """
    spec.validate()
    n, c = spec.n_entities, spec.complexity
    start = 0
    groups = []
    for size in (n, c * n, n, c, 1):
        groups.append(tuple(range(start, start + size)))
        start += size
    return VocabLayout(*groups)


def g1(i: int, j: int, spec: DatasetSpec) -> int:
    """
    First-hop map: subject i under relation j lands on bridge (j-1)*N + i.

    :param i: Subject index, 1..N.
    :param j: Relation index, 1..C.
    :returns: Bridge index in 1..C*N.
    :raises IndexOutOfRange: If an index is out of range.
    """
    n, c = spec.n_entities, spec.complexity
    if not 1 <= i <= n:
        raise IndexOutOfRange(f"Subject index {i} outside 1..{n}")
    if not 1 <= j <= c:
        raise IndexOutOfRange(f"Relation index {j} outside 1..{c}")
    return (j - 1) * n + i


def g2(k: int, spec: DatasetSpec) -> int:
    """
    Second-hop map: bridge k = (j-1)*N + i reaches object ((i + j - 2) mod N) + 1.

    :param k: Bridge index, 1..C*N.
    :returns: Object index in 1..N.
    :raises IndexOutOfRange: If k is out of range.
    """
    n, c = spec.n_entities, spec.complexity
    if not 1 <= k <= c * n:
        raise IndexOutOfRange(f"Bridge index {k} outside 1..{c * n}")
    j0, i0 = divmod(k - 1, n)
    return (i0 + j0) % n + 1


def two_hop_queries(spec: DatasetSpec, layout: VocabLayout) -> list[Example]:
    """All C*N composed queries (a_i, r1_j, r2) -> object, in (j, i) order."""
    queries = []
    for j in range(1, spec.complexity + 1):
        for i in range(1, spec.n_entities + 1):
            obj = g2(g1(i, j, spec), spec)
            queries.append(
                Example(
                    tokens=(
                        layout.subjects[i - 1],
                        layout.rel1[j - 1],
                        layout.rel2[0],
                    ),
                    target=layout.objects[obj - 1],
                    kind=ExampleKind.TWO_HOP,
                )
            )
    return queries


def generate(spec: DatasetSpec) -> Dataset:
    """
    Build the train rows and OOD test queries for a spec.

    Train holds every first-hop fact, every second-hop fact and, with identity
    supervision, one zero-hop row per bridge. With two-hop data in train, a
    seeded subset of bridges contributes its composed queries to train and the
    rest form the OOD test set.

    :param spec: The dataset spec.
    :returns: The dataset.
    :raises InvalidSpec: On an invalid spec.
    """
    layout = build_layout(spec)
    n, c = spec.n_entities, spec.complexity
    train: list[Example] = []

    for j in range(1, c + 1):
        for i in range(1, n + 1):
            train.append(
                Example(
                    tokens=(layout.subjects[i - 1], layout.rel1[j - 1]),
                    target=layout.bridges[g1(i, j, spec) - 1],
                    kind=ExampleKind.ONE_HOP_FIRST,
                )
            )
    for k in range(1, c * n + 1):
        train.append(
            Example(
                tokens=(layout.bridges[k - 1], layout.rel2[0]),
                target=layout.objects[g2(k, spec) - 1],
                kind=ExampleKind.ONE_HOP_SECOND,
            )
        )
    if spec.include_identity:
        for bridge in layout.bridges:
            train.append(
                Example(tokens=(bridge,), target=bridge, kind=ExampleKind.ZERO_HOP)
            )

    queries = two_hop_queries(spec, layout)
    if spec.include_two_hop_in_train:
        rng = make_rng(spec.seed)
        n_seen = min(max(1, round(spec.two_hop_fraction * c * n)), c * n - 1)
        seen = set(int(k) for k in rng.choice(c * n, size=n_seen, replace=False))
        # query order matches bridge order: query q has bridge index q + 1
        train.extend(q for pos, q in enumerate(queries) if pos in seen)
        test_ood = [q for pos, q in enumerate(queries) if pos not in seen]
    else:
        test_ood = queries

    _LOGGER.debug(
        f"Generated N={n} C={c} identity={spec.include_identity}: "
        f"{len(train)} train rows, {len(test_ood)} OOD queries"
    )
    return Dataset(spec, layout, train, test_ood)


def _first_hop_table(layout: VocabLayout) -> dict[tuple[int, int], int]:
    spec = DatasetSpec(n_entities=layout.n, complexity=layout.c)
    return {
        (layout.subjects[i - 1], layout.rel1[j - 1]): layout.bridges[
            g1(i, j, spec) - 1
        ]
        for j in range(1, layout.c + 1)
        for i in range(1, layout.n + 1)
    }


def complexity_of(dataset: Dataset) -> int:
    """
    Maximum number of distinct objects any subject reaches by composing a
    first-hop fact with a second-hop fact of the training set.

    :param dataset: The dataset.
    :returns: The complexity; 0 when no composition exists.
    """
    first: dict[int, set[int]] = {}
    second: dict[int, set[int]] = {}
    for ex in dataset.train:
        if ex.kind is ExampleKind.ONE_HOP_FIRST:
            first.setdefault(ex.tokens[0], set()).add(ex.target)
        elif ex.kind is ExampleKind.ONE_HOP_SECOND:
            second.setdefault(ex.tokens[0], set()).add(ex.target)

    best = 0
    for bridges in first.values():
        reached = set()
        for bridge in bridges:
            reached |= second.get(bridge, set())
        best = max(best, len(reached))
    return best


def vocab_labels(layout: VocabLayout) -> dict[int, str]:
    """Readable label per token id: a1.., b1.., c1.., r1_1.., r2."""
    labels = {}
    for pos, token in enumerate(layout.subjects):
        labels[token] = f"a{pos + 1}"
    for pos, token in enumerate(layout.bridges):
        labels[token] = f"b{pos + 1}"
    for pos, token in enumerate(layout.objects):
        labels[token] = f"c{pos + 1}"
    for pos, token in enumerate(layout.rel1):
        labels[token] = f"r1_{pos + 1}"
    labels[layout.rel2[0]] = "r2"
    return labels


def dataset_to_json(dataset: Dataset) -> str:
    return stable_json(dataset.as_dict())


def dataset_from_json(text: str) -> Dataset:
    """
    Parse a dataset document written by :func:`dataset_to_json`.

    :raises CorruptFile: If the document is malformed.
    """
    try:
        data = json.loads(text)
        spec = DatasetSpec(**data["spec"]).validate()
        layout = VocabLayout(
            **{k: tuple(int(t) for t in data["layout"][k]) for k in VocabLayout._fields}
        )
        train = [_example_from_dict(row) for row in data["train"]]
        test_ood = [_example_from_dict(row) for row in data["test_ood"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"Malformed dataset document: {exc}") from None
    if layout != build_layout(spec):
        raise CorruptFile("Dataset layout does not match its spec")
    return Dataset(spec, layout, train, test_ood)


def _example_from_dict(row: dict[str, Any]) -> Example:
    return Example(
        tokens=tuple(int(t) for t in row["tokens"]),
        target=int(row["target"]),
        kind=ExampleKind(row["kind"]),
    )
