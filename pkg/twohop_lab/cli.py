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
Command-line front door: ``twohop-lab {gen,train,theory,sweep,analyze}``.

Exit codes: 0 on success, 1 on input or configuration errors, 2 on
numerical failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Sequence

from .exceptions import InvalidConfig, NumericalError, TwoHopException
from .models.configuration import config_from_dict, get_log_level, load_json_config
from .models.taskgen import DatasetSpec
from .models.training import TrainConfig
from .sweep import SweepConfig
from .theory.oracle import OracleConfig
from .theory.solver import SolverConfig
from .twohop_lab import LabConfig, TwoHopLab

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

_SECTIONS = (
    "dataset",
    "train",
    "model",
    "d_m",
    "transformer",
    "solver",
    "oracle",
    "sweep",
    "out",
    "seed",
    "workers",
)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (default: TWOHOP_OUT or ./out)")
    common.add_argument("--seed", type=_u64, help="override every seed")
    common.add_argument("--workers", type=int, help="parallel workers")
    common.add_argument(
        "--log-level", help="error, warning, info or debug (default: TWOHOP_LOG)"
    )

    parser = argparse.ArgumentParser(
        prog="twohop-lab",
        description="Identity-bridge experiments for two-hop reasoning.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="generate a dataset")
    gen.add_argument("-n", "--n-entities", type=int)
    gen.add_argument("-c", "--complexity", type=int)
    gen.add_argument("--no-identity", action="store_true")
    gen.add_argument("--two-hop-in-train", action="store_true")

    train = commands.add_parser("train", parents=[common], help="train a model")
    train.add_argument("dataset", help="dataset JSON written by gen")
    train.add_argument("--model", choices=("embmlp", "transformer"))
    train.add_argument("--max-steps", type=int)
    train.add_argument("--init", choices=("standard", "small"))
    train.add_argument("--weight-decay", type=float)

    theory = commands.add_parser("theory", parents=[common], help="solve a program")
    theory.add_argument("-n", type=int, required=True)
    theory.add_argument("--program", choices=("id", "noid"), default="id")
    theory.add_argument(
        "--oracle", action="store_true", help="also run the full-matrix oracle"
    )

    commands.add_parser("sweep", parents=[common], help="run the complexity sweep")

    analyze = commands.add_parser("analyze", parents=[common], help="diagnostics")
    analyze.add_argument("checkpoint")
    analyze.add_argument("dataset")
    analyze.add_argument("--sample-count", type=int)
    return parser


def _sections(args: argparse.Namespace) -> dict[str, Any]:
    if not args.config:
        return {}
    data = load_json_config(args.config)
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise InvalidConfig(f"Unknown configuration keys: {', '.join(unknown)}")
    return data


def _make_lab(args: argparse.Namespace, sections: dict[str, Any]) -> TwoHopLab:
    return LabConfig(
        out=args.out or sections.get("out"),
        seed=args.seed if args.seed is not None else sections.get("seed"),
        workers=args.workers if args.workers is not None else sections.get("workers"),
    ).make_lab()


def _overrides(args: argparse.Namespace, **names: str) -> dict[str, Any]:
    """Flags that were given, keyed by the config field they override."""
    return {
        field: getattr(args, attr)
        for field, attr in names.items()
        if getattr(args, attr) is not None
    }


def _train_config(model: str, fields: dict[str, Any]) -> TrainConfig:
    """Model defaults overridden by the given fields."""
    config_from_dict(TrainConfig, fields)
    if model == "transformer":
        return TrainConfig.for_transformer(**fields)
    return TrainConfig(**fields)


def _run(args: argparse.Namespace) -> None:
    sections = _sections(args)
    lab = _make_lab(args, sections)
    if args.command == "gen":
        spec = dict(sections.get("dataset", {}))
        spec.update(_overrides(args, n_entities="n_entities", complexity="complexity"))
        if args.no_identity:
            spec["include_identity"] = False
        if args.two_hop_in_train:
            spec["include_two_hop_in_train"] = True
        if "n_entities" not in spec:
            raise InvalidConfig("gen needs -n/--n-entities or dataset.n_entities")
        lab.gen(config_from_dict(DatasetSpec, spec))
    elif args.command == "train":
        model = args.model or sections.get("model", "embmlp")
        train = dict(sections.get("train", {}))
        train.update(
            _overrides(
                args, max_steps="max_steps", init="init", weight_decay="weight_decay"
            )
        )
        lab.train(
            args.dataset,
            model,
            _train_config(model, train),
            sections.get("d_m"),
            sections.get("transformer"),
        )
    elif args.command == "theory":
        lab.theory(
            args.n,
            args.program,
            config_from_dict(SolverConfig, sections.get("solver")).validate(),
            args.oracle,
            config_from_dict(OracleConfig, sections.get("oracle")),
        )
    elif args.command == "sweep":
        lab.sweep(SweepConfig.from_dict(sections.get("sweep", {})))
    elif args.command == "analyze":
        lab.analyze(args.checkpoint, args.dataset, args.sample_count)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = get_log_level(args.log_level)
    except InvalidConfig as exc:
        print(f"twohop-lab: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(
        level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        _run(args)
    except NumericalError as exc:
        _fail(exc, level)
        return EXIT_NUMERICAL
    except (TwoHopException, OSError) as exc:
        _fail(exc, level)
        return EXIT_INPUT
    return EXIT_OK


def _fail(exc: Exception, level: str) -> None:
    message = str(exc) or getattr(exc, "message", "") or type(exc).__name__
    if level == "debug":
        _LOGGER.exception(message)
    print(f"twohop-lab: {type(exc).__name__}: {message}", file=sys.stderr)
