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

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, NamedTuple

from . import analysis
from .exceptions import CorruptFile, InvalidConfig, ShapeMismatch
from .models import embmlp, nanoformer
from .models.checkpoint import checkpoint_kind, load_embmlp, save_embmlp
from .models.configuration import get_out_dir, get_workers
from .models.embmlp import EmbMlpParams
from .models.nanoformer import TransformerParams
from .models.taskgen import (
    Dataset,
    DatasetSpec,
    dataset_from_json,
    dataset_to_json,
    generate,
)
from .models.training import TrainConfig, write_trace
from .sweep import SweepConfig, run_sweep
from .theory.oracle import OracleConfig, full_matrix_oracle
from .theory.restricted import matrix_ood_margins, nuclear_norm_closed
from .theory.solver import SolveReport, SolverConfig, solve
from .utils import stable_json, write_text

_LOGGER = logging.getLogger(__name__)


class LabConfig(NamedTuple):
    """Stores lab configuration, which can be used to create any number of
    identically configured instances of TwoHopLab."""

    out: str | Path | None = None
    seed: int | None = None
    workers: int | None = None

    def make_lab(self) -> TwoHopLab:
        return TwoHopLab(
            out=get_out_dir(self.out),
            seed=self.seed,
            workers=get_workers(self.workers),
        )


class TwoHopLab:
    """Runs the lab's commands and writes their artifacts under one directory."""

    _FILE_NAMES = {
        "dataset": "dataset.json",
        "embmlp": "embmlp.ckpt",
        "transformer": "transformer.ckpt",
        "trace": "trace.csv",
        "alignment_trace": "alignment_trace.csv",
        "meta": "meta.json",
        "theory": "theory_{program}_n{n}.json",
        "logits": "logits.csv",
        "margins": "margins.csv",
        "patterns": "patterns.json",
        "alignment": "alignment.csv",
    }

    def __init__(
        self, out: Path | str = "out", seed: int | None = None, workers: int = 1
    ) -> None:
        """
        :param out: Directory receiving every artifact.
        :param seed: When set, overrides the seed of datasets, training runs
            and solver starts.
        :param workers: Worker count for the sweep and the multi-start solver.
        """
        self.out = Path(out)
        self.seed = seed
        self.workers = workers

    def __repr__(self):
        return (
            f"{self.__class__.__name__}({str(self.out)!r}, seed={self.seed!r}, "
            f"workers={self.workers!r})"
        )

    def _path(self, key: str, **kwargs: Any) -> Path:
        return self.out / self._FILE_NAMES[key].format(**kwargs)

    def _write_meta(self, command: str, **fields: Any) -> Path:
        meta = {
            "command": command,
            "created": datetime.now(timezone.utc).isoformat(),
            **fields,
        }
        return write_text(self._path("meta"), stable_json(meta))

    @staticmethod
    def load_dataset(path: Path | str) -> Dataset:
        """:raises CorruptFile: If the file is missing or malformed."""
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CorruptFile(f"Cannot read dataset {path}: {exc}") from None
        return dataset_from_json(text)

    def gen(self, spec: DatasetSpec) -> Path:
        """
        Generate a dataset and write its JSON document.

        :raises InvalidSpec: On an invalid spec.
        """
        if self.seed is not None:
            spec = spec._replace(seed=self.seed)
        dataset = generate(spec.validate())
        path = write_text(self._path("dataset"), dataset_to_json(dataset))
        _LOGGER.info(
            f"Wrote {len(dataset.train)} train rows and "
            f"{len(dataset.test_ood)} OOD queries to {path}"
        )
        return path

    def train(
        self,
        dataset_path: Path | str,
        model: str = "embmlp",
        train_config: TrainConfig | None = None,
        d_m: int | None = None,
        transformer: dict[str, Any] | None = None,
    ) -> dict[str, Path]:
        """
        Train a model on a dataset file and write its checkpoint and trace.

        :param dataset_path: A file written by :meth:`gen`.
        :param model: "embmlp" or "transformer".
        :param train_config: Optimization settings; model defaults when None.
        :param d_m: Emb-MLP width.
        :param transformer: TransformerConfig fields other than ``d_vocab``.
        :returns: Paths of the written artifacts by kind.
        :raises CorruptFile: If the dataset file is unreadable.
        :raises Diverged: If the loss becomes non-finite.
        """
        dataset = self.load_dataset(dataset_path)
        paths: dict[str, Path] = {}
        if model == "embmlp":
            config = train_config or TrainConfig()
            if self.seed is not None:
                config = config._replace(seed=self.seed)
            params, trace = embmlp.train(dataset, config, d_m)
            paths["checkpoint"] = save_embmlp(
                self._path("embmlp"), params.E, params.W_proj
            )
        elif model == "transformer":
            config = train_config or TrainConfig.for_transformer()
            if self.seed is not None:
                config = config._replace(seed=self.seed)
            model_config = nanoformer.default_config(dataset, **(transformer or {}))
            tf_params, trace = nanoformer.tf_train(dataset, model_config, config)
            paths["checkpoint"] = tf_params.save(self._path("transformer"))
            paths["alignment_trace"] = write_text(
                self._path("alignment_trace"), trace.alignment_csv()
            )
        else:
            raise InvalidConfig(
                f"Unknown model {model!r}, expected 'embmlp' or 'transformer'"
            )
        paths["trace"] = write_trace(trace, self._path("trace"))
        paths["meta"] = self._write_meta(
            "train",
            model=model,
            steps=trace.final.step,
            seed=config.seed,
            weight_decay=config.weight_decay,
        )
        return paths

    def theory(
        self,
        n: int,
        program: str = "id",
        solver_config: SolverConfig | None = None,
        oracle: bool = False,
        oracle_config: OracleConfig | None = None,
    ) -> SolveReport:
        """
        Solve a reduced program and write the report, optionally next to the
        full-matrix oracle for the same instance.

        :raises InvalidDimension: If n < 2 (or n > 8 with the oracle).
        :raises DidNotConverge: If no solver start converges.
        """
        config = solver_config or SolverConfig()
        if self.seed is not None:
            config = config._replace(seed=self.seed)
        if config.workers == 1 and self.workers > 1:
            config = config._replace(workers=self.workers)
        report = solve(program, n, config)
        document = report.as_dict()
        if oracle:
            document["oracle"] = self._oracle(report, oracle_config or OracleConfig())
        write_text(self._path("theory", program=program, n=n), stable_json(document))
        return report

    @staticmethod
    def _oracle(report: SolveReport, config: OracleConfig) -> dict[str, Any]:
        result = full_matrix_oracle(report.n, report.program == "id", config)
        margins = matrix_ood_margins(result.W, report.n)
        entry = {
            "objective": result.objective,
            "iterations": result.iterations,
            "min_training_margin": result.min_margin,
            "ood_correct": [r.correct for r in margins],
        }
        if report.program == "id":
            reduced = 0.5 * nuclear_norm_closed(report.point) ** 2
            entry["reduced_objective"] = reduced
            entry["relative_gap"] = abs(result.objective - reduced) / reduced
        return entry

    def sweep(self, config: SweepConfig | None = None) -> Path:
        """
        Run the complexity sweep into the output directory.

        :raises SweepError: If every trial failed.
        """
        config = config or SweepConfig()
        if config.workers == 1 and self.workers > 1:
            config = config._replace(workers=self.workers)
        if self.seed is not None:
            config = config._replace(seeds=(self.seed,))
        return run_sweep(config, self.out)

    def analyze(
        self,
        checkpoint: Path | str,
        dataset_path: Path | str,
        sample_count: int | None = None,
    ) -> dict[str, Path]:
        """
        Write diagnostics for a checkpoint against the dataset it was trained on.

        Emb-MLP checkpoints give logits, margins and patterns (with a block fit
        at complexity one); transformer checkpoints give margins and the
        hidden-state alignment.

        :param sample_count: First-hop pairs for the alignment; all when None.
        :raises ShapeMismatch: If the checkpoint does not fit the vocabulary.
        :raises CorruptFile: If either file is unreadable.
        """
        dataset = self.load_dataset(dataset_path)
        layout = dataset.layout
        kind = checkpoint_kind(checkpoint)
        paths: dict[str, Path] = {}
        if kind == "embmlp":
            E, W_proj = load_embmlp(checkpoint)
            params = EmbMlpParams.from_arrays(E, W_proj, layout)
            W = embmlp.logit_matrix(params)
            paths["logits"] = analysis.write_logits_csv(W, layout, self._path("logits"))
            fit = None
            if layout.c == 1:
                fit = analysis.fit_blocks(W, layout.n, dataset.spec.include_identity)
            paths["patterns"] = analysis.write_patterns_json(
                analysis.template_pattern_check(W, layout), self._path("patterns"), fit
            )
            model: analysis.Model = params
        else:
            tf_params = TransformerParams.load(checkpoint)
            if tf_params.config.d_vocab != layout.vocab_size:
                raise ShapeMismatch(
                    f"Checkpoint vocabulary {tf_params.config.d_vocab} does not "
                    f"match the dataset's {layout.vocab_size}"
                )
            pairs = nanoformer.first_hop_pairs(dataset)
            score = analysis.alignment(
                tf_params, dataset, sample_count or len(pairs), self.seed or 0
            )
            paths["alignment"] = analysis.write_alignment_csv(
                score, self._path("alignment")
            )
            model = tf_params
        reports = analysis.margins(model, dataset.test_ood, layout)
        paths["margins"] = analysis.write_margins_csv(
            reports, layout, self._path("margins")
        )
        _LOGGER.info(
            f"OOD accuracy of {checkpoint}: "
            f"{analysis.ood_accuracy(model, dataset):.3f}"
        )
        return paths

