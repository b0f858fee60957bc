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
The complexity sweep: every (variant, C, seed) trial trains one model on a
freshly generated dataset and records its final accuracies.

Each trial writes its own JSON file under ``trials/``; the files are merged
single-threaded into ``results.csv`` (one row per trial plus one ``mean``
row per variant and complexity) and ``aggregates.csv`` (mean and standard
deviation per variant and complexity).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, NamedTuple

import numpy as np

from .exceptions import CorruptFile, InvalidConfig, SweepError, TwoHopException
from .models import embmlp, nanoformer
from .models.taskgen import DatasetSpec, generate
from .models.training import TrainConfig
from .utils import stable_json, write_text

_LOGGER = logging.getLogger(__name__)

RESULTS_HEADER = (
    "variant", "C", "seed", "ood_acc", "train_acc", "steps", "wall_ms", "failed"
)
AGGREGATES_HEADER = (
    "variant",
    "C",
    "trials",
    "failed",
    "ood_acc_mean",
    "ood_acc_sd",
    "train_acc_mean",
    "train_acc_sd",
    "steps_mean",
    "wall_ms_mean",
)


class Variant(str, Enum):
    EMBMLP_ID = "EmbMlpId"
    EMBMLP_NOID = "EmbMlpNoId"
    TF_STANDARD = "TfStandard"
    TF_SMALL_INIT = "TfSmallInit"
    TF_WEIGHT_DECAY = "TfWeightDecay"

    @property
    def is_transformer(self) -> bool:
        return self.value.startswith("Tf")


_VARIANT_ORDER = {variant: pos for pos, variant in enumerate(Variant)}


class SweepConfig(NamedTuple):
    """
    Grid and training budgets of a sweep.

    Transformer variants all train on identity-supervised data; they differ
    only in initialization (``small_init_gamma``) and in the L2 coefficient:
    ``tf_weight_decay`` for the standard and small-init variants,
    ``weight_decay`` for the weight-decay variant.
    """

    complexities: tuple[int, ...] = (1, 2, 4)
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[Variant, ...] = tuple(Variant)
    n_entities: int = 20
    embmlp_steps: int = 50_000
    embmlp_learning_rate: float = 0.5
    tf_steps: int = 10_000
    tf_learning_rate: float = 1e-3
    tf_d_m: int = 64
    tf_layers: int = 2
    small_init_gamma: float = 1.5
    tf_weight_decay: float = 1e-4
    weight_decay: float = 0.01
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepConfig:
        """
        Build from a JSON object; lists become tuples and variant names enums.

        :raises InvalidConfig: On unknown keys or variant names.
        """
        unknown = sorted(set(data) - set(cls._fields))
        if unknown:
            raise InvalidConfig(f"Unknown SweepConfig fields: {', '.join(unknown)}")
        values = dict(data)
        for key in ("complexities", "seeds"):
            if key in values:
                values[key] = tuple(int(v) for v in values[key])
        if "variants" in values:
            try:
                values["variants"] = tuple(Variant(v) for v in values["variants"])
            except ValueError as exc:
                raise InvalidConfig(str(exc)) from None
        return cls(**values)

    def validate(self) -> SweepConfig:
        if not (self.complexities and self.seeds and self.variants):
            raise InvalidConfig("complexities, seeds and variants must be non-empty")
        if min(self.complexities) < 1:
            raise InvalidConfig(f"Complexities must be positive: {self.complexities}")
        if min(self.seeds) < 0:
            raise InvalidConfig(f"Seeds must be unsigned: {self.seeds}")
        if self.n_entities < 2:
            raise InvalidConfig(f"n_entities must be at least 2: {self.n_entities}")
        if self.workers < 1:
            raise InvalidConfig(f"workers must be positive: {self.workers}")
        return self

    def trials(self) -> list[tuple[Variant, int, int]]:
        return [
            (Variant(variant), c, seed)
            for variant in self.variants
            for c in self.complexities
            for seed in self.seeds
        ]


class TrialResult(NamedTuple):
    variant: Variant
    complexity: int
    seed: int
    ood_acc: float
    train_acc: float
    steps: int
    wall_ms: int
    failed: bool = False
    alignment: float | None = None
    error: str | None = None

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return _VARIANT_ORDER[self.variant], self.complexity, self.seed

    def as_dict(self) -> dict[str, Any]:
        data = self._asdict()
        data["variant"] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrialResult:
        values = dict(data)
        values["variant"] = Variant(values["variant"])
        return cls(**values)


def trial_path(out_dir: Path, variant: Variant, complexity: int, seed: int) -> Path:
    return out_dir / "trials" / f"{variant.value}_C{complexity}_s{seed}.json"


def _train_variant(
    variant: Variant, complexity: int, seed: int, config: SweepConfig
) -> tuple[float, float, int, float | None]:
    spec = DatasetSpec(
        n_entities=config.n_entities,
        complexity=complexity,
        include_identity=variant is not Variant.EMBMLP_NOID,
        seed=seed,
    )
    dataset = generate(spec)
    if not variant.is_transformer:
        train_config = TrainConfig(
            learning_rate=config.embmlp_learning_rate,
            max_steps=config.embmlp_steps,
            seed=seed,
        )
        _, trace = embmlp.train(dataset, train_config)
        final = trace.final
        return final.ood_acc, final.train_acc, final.step, None

    init = "small" if variant is Variant.TF_SMALL_INIT else "standard"
    if variant is Variant.TF_WEIGHT_DECAY:
        decay = config.weight_decay
    else:
        decay = config.tf_weight_decay
    train_config = TrainConfig.for_transformer(
        init=init,
        gamma=config.small_init_gamma,
        learning_rate=config.tf_learning_rate,
        weight_decay=decay,
        max_steps=config.tf_steps,
        seed=seed,
    )
    model_config = nanoformer.default_config(
        dataset,
        d_m=config.tf_d_m,
        n_layers=config.tf_layers,
        init=init,
        gamma=config.small_init_gamma,
    )
    _, trace = nanoformer.tf_train(dataset, model_config, train_config)
    final = trace.final
    return final.ood_acc, final.train_acc, final.step, final.alignment


def run_trial(
    variant: Variant, complexity: int, seed: int, config: SweepConfig, out_dir: Path
) -> TrialResult:
    """
    Train one trial and write its JSON file. Library errors become a failed
    result rather than propagating.
    """
    _LOGGER.info(f"Trial {variant.value} C={complexity} seed={seed} started")
    start = time.perf_counter()
    try:
        ood_acc, train_acc, steps, align = _train_variant(
            variant, complexity, seed, config
        )
        result = TrialResult(
            variant,
            complexity,
            seed,
            float(ood_acc),
            float(train_acc),
            int(steps),
            round((time.perf_counter() - start) * 1000),
            alignment=align,
        )
    except TwoHopException as exc:
        message = str(exc) or getattr(exc, "message", type(exc).__name__)
        _LOGGER.warning(
            f"Trial {variant.value} C={complexity} seed={seed} failed: {message}"
        )
        result = TrialResult(
            variant,
            complexity,
            seed,
            float("nan"),
            float("nan"),
            0,
            round((time.perf_counter() - start) * 1000),
            failed=True,
            error=message,
        )
    write_text(
        trial_path(out_dir, variant, complexity, seed), stable_json(result.as_dict())
    )
    _LOGGER.info(
        f"Trial {variant.value} C={complexity} seed={seed} finished: "
        f"OOD acc {result.ood_acc:.3f}"
    )
    return result


def read_trial(path: Path) -> TrialResult:
    """:raises CorruptFile: If the trial file is unreadable or malformed."""
    try:
        return TrialResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"Cannot read trial {path}: {exc}") from None


def _format(value: float) -> str:
    return "" if np.isnan(value) else repr(float(value))


def _group(
    results: Iterable[TrialResult],
) -> dict[tuple[Variant, int], list[TrialResult]]:
    groups: dict[tuple[Variant, int], list[TrialResult]] = {}
    for result in sorted(results, key=lambda r: r.sort_key):
        groups.setdefault((result.variant, result.complexity), []).append(result)
    return groups


def _stats(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), sd


def results_csv(results: Iterable[TrialResult]) -> str:
    """
    Trial rows sorted by (variant, C, seed), each group followed by a row with
    seed "mean" over its successful trials.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for (variant, complexity), group in _group(results).items():
        for r in group:
            writer.writerow(
                [
                    variant.value,
                    complexity,
                    r.seed,
                    _format(r.ood_acc),
                    _format(r.train_acc),
                    r.steps,
                    r.wall_ms,
                    str(r.failed).lower(),
                ]
            )
        ok = [r for r in group if not r.failed]
        writer.writerow(
            [
                variant.value,
                complexity,
                "mean",
                _format(_stats([r.ood_acc for r in ok])[0]),
                _format(_stats([r.train_acc for r in ok])[0]),
                _format(_stats([float(r.steps) for r in ok])[0]),
                _format(_stats([float(r.wall_ms) for r in ok])[0]),
                str(not ok).lower(),
            ]
        )
    return buf.getvalue()


def aggregates_csv(results: Iterable[TrialResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGGREGATES_HEADER)
    for (variant, complexity), group in _group(results).items():
        ok = [r for r in group if not r.failed]
        ood = _stats([r.ood_acc for r in ok])
        train = _stats([r.train_acc for r in ok])
        writer.writerow(
            [
                variant.value,
                complexity,
                len(group),
                len(group) - len(ok),
                _format(ood[0]),
                _format(ood[1]),
                _format(train[0]),
                _format(train[1]),
                _format(_stats([float(r.steps) for r in ok])[0]),
                _format(_stats([float(r.wall_ms) for r in ok])[0]),
            ]
        )
    return buf.getvalue()


def run_sweep(config: SweepConfig, out_dir: Path | str) -> Path:
    """
    Run every trial of the grid and write the merged results.

    :param config: The sweep grid.
    :param out_dir: Directory receiving ``trials/``, ``results.csv`` and
        ``aggregates.csv``.
    :returns: Path of ``results.csv``.
    :raises SweepError: If every trial failed.
    """
    config.validate()
    out_dir = Path(out_dir)
    trials = config.trials()
    _LOGGER.info(f"Sweep of {len(trials)} trials with {config.workers} workers")
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(run_trial, variant, c, seed, config, out_dir)
                for variant, c, seed in trials
            ]
            for future in futures:
                future.result()
    else:
        for variant, c, seed in trials:
            run_trial(variant, c, seed, config, out_dir)

    results = [read_trial(trial_path(out_dir, *trial)) for trial in trials]
    write_text(out_dir / "aggregates.csv", aggregates_csv(results))
    path = write_text(out_dir / "results.csv", results_csv(results))
    failed = sum(r.failed for r in results)
    if failed == len(results):
        raise SweepError(f"All {failed} sweep trials failed")
    if failed:
        _LOGGER.warning(f"{failed} of {len(results)} sweep trials failed")
    return path
