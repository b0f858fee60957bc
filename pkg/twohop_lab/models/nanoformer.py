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
A small decoder-only transformer in numpy with a hand-written backward pass.

Each block is pre-norm::

    Z  = X + MHA(LN(X))
    X' = Z + MLP(LN(Z))

with causal multi-head attention, a GELU MLP of width 4*d_m, learned
positional embeddings, a final LayerNorm and an LM head tied to the token
embedding. Only the last position of each sequence is supervised.
"""
from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from ..exceptions import (
    CorruptFile,
    InvalidConfig,
    NumericalOverflow,
    SequenceTooLong,
    UnknownToken,
)
from ..utils import check_finite, make_rng, timed
from .checkpoint import load_tensors, save_tensors
from .taskgen import Dataset, Example, ExampleKind
from .training import StopRule, TraceRow, TrainConfig, TrainTrace, make_optimizer

_LOGGER = logging.getLogger(__name__)

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class TransformerConfig(NamedTuple):
    d_vocab: int
    d_m: int = 64
    d_k: int = 32
    n_heads: int = 2
    n_layers: int = 2
    context: int = 3
    init: str = "standard"
    gamma: float = 1.0
    tie_embeddings: bool = True
    ln_eps: float = 1e-12

    @property
    def d_attn(self) -> int:
        """Width of the query/key/value projections, H * d_k."""
        return self.n_heads * self.d_k

    def validate(self) -> TransformerConfig:
        if self.d_vocab < 2:
            raise InvalidConfig(f"d_vocab must be at least 2, got {self.d_vocab}")
        if self.d_m < 2 or self.d_k < 1 or self.n_heads < 1:
            raise InvalidConfig(
                f"Invalid widths d_m={self.d_m}, d_k={self.d_k}, H={self.n_heads}"
            )
        if self.n_layers < 1:
            raise InvalidConfig(f"n_layers must be at least 1, got {self.n_layers}")
        if self.context < 3:
            raise InvalidConfig(f"context must be at least 3, got {self.context}")
        if self.init not in ("standard", "small"):
            raise InvalidConfig(f"Unknown init policy {self.init!r}")
        if self.init == "small" and not self.gamma > 0.5:
            raise InvalidConfig(f"Small init needs gamma > 0.5, got {self.gamma}")
        if self.ln_eps < 0:
            raise InvalidConfig(f"ln_eps must be nonnegative, got {self.ln_eps}")
        return self

    def sigma(self, d_in: int) -> float:
        if self.init == "standard":
            return 0.02
        return float(d_in) ** (-self.gamma)


class TransformerParams:
    """Named parameter tensors of one model, in a fixed order."""

    def __init__(
        self, config: TransformerConfig, tensors: dict[str, np.ndarray]
    ) -> None:
        self.config = config
        self.tensors = tensors

    def __repr__(self):
        return f"{self.__class__.__name__}({self.config!r})"

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> TransformerParams:
        return TransformerParams(
            self.config, {name: t.copy() for name, t in self.tensors.items()}
        )

    @property
    def head(self) -> np.ndarray:
        """Output projection, d_m x d_vocab."""
        if self.config.tie_embeddings:
            return self.tensors["tok_emb"].T
        return self.tensors["lm_head"]

    def save(self, path: Path | str) -> Path:
        return save_tensors(path, self.config._asdict(), self.tensors)

    @classmethod
    def load(cls, path: Path | str) -> TransformerParams:
        config, tensors = load_tensors(path)
        try:
            config = TransformerConfig(**config)
        except TypeError as exc:
            raise CorruptFile(f"Bad transformer config in {path}: {exc}") from None
        return cls(config.validate(), tensors)


def _layer_names(layer: int) -> dict[str, str]:
    prefix = f"h{layer}."
    return {
        key: prefix + key
        for key in (
            "ln1.g", "ln1.b",
            "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v",
            "attn.w_o", "attn.b_o",
            "ln2.g", "ln2.b",
            "mlp.w_in", "mlp.b_in", "mlp.w_out", "mlp.b_out",
        )
    }


def decayed(name: str) -> bool:
    """Weight decay applies to weight matrices and embeddings, not LN or biases."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.startswith("b") or leaf == "g")


def init_tf_params(config: TransformerConfig, seed: int) -> TransformerParams:
    """
    Gaussian init of every weight matrix with sigma from the config's policy
    (input dimension = first axis); biases zero, LayerNorm scale one.

    Embedding tables are row lookups; their sigma uses the model width.
    """
    config.validate()
    rng = make_rng(seed)
    d, a, v = config.d_m, config.d_attn, config.d_vocab

    def weight(d_in: int, d_out: int, fan: int | None = None) -> np.ndarray:
        sigma = config.sigma(fan or d_in)
        return rng.normal(0.0, sigma, size=(d_in, d_out))

    tensors = {
        "tok_emb": weight(v, d, fan=d),
        "pos_emb": weight(config.context, d, fan=d),
    }
    for layer in range(config.n_layers):
        names = _layer_names(layer)
        tensors[names["ln1.g"]] = np.ones(d)
        tensors[names["ln1.b"]] = np.zeros(d)
        for proj in ("q", "k", "v"):
            tensors[names[f"attn.w_{proj}"]] = weight(d, a)
            tensors[names[f"attn.b_{proj}"]] = np.zeros(a)
        tensors[names["attn.w_o"]] = weight(a, d)
        tensors[names["attn.b_o"]] = np.zeros(d)
        tensors[names["ln2.g"]] = np.ones(d)
        tensors[names["ln2.b"]] = np.zeros(d)
        tensors[names["mlp.w_in"]] = weight(d, 4 * d)
        tensors[names["mlp.b_in"]] = np.zeros(4 * d)
        tensors[names["mlp.w_out"]] = weight(4 * d, d)
        tensors[names["mlp.b_out"]] = np.zeros(d)
    tensors["ln_f.g"] = np.ones(d)
    tensors["ln_f.b"] = np.zeros(d)
    if not config.tie_embeddings:
        tensors["lm_head"] = weight(d, v)
    return TransformerParams(config, tensors)


# -- primitives -------------------------------------------------------------


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    std = np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered / std
    return g * x_hat + b, (x_hat, std, g)


def _layer_norm_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, ...]:
    x_hat, std, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * x_hat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dx_hat = dy * g
    dx = (
        dx_hat
        - dx_hat.mean(axis=-1, keepdims=True)
        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    ) / std
    return dx, dg, db


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    tanh = np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3))
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + tanh) + 0.5 * x * (1.0 - tanh**2) * d_inner


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    batch, seq, width = x.shape
    return x.reshape(batch, seq, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    batch, heads, seq, d_k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, seq, heads * d_k)


# -- forward / backward -----------------------------------------------------


class HiddenStates(NamedTuple):
    """Residual stream per layer boundary: array (L+1, batch, seq, d_m)."""

    states: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.states.shape[0] - 1

    def final_position(self) -> np.ndarray:
        """(L+1, batch, d_m) at the last position."""
        return self.states[:, :, -1, :]


def _check_tokens(params: TransformerParams, tokens: np.ndarray) -> None:
    config = params.config
    if tokens.shape[1] > config.context:
        raise SequenceTooLong(
            f"Sequence of length {tokens.shape[1]} exceeds context {config.context}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.d_vocab):
        raise UnknownToken(f"Token ids must lie in 0..{config.d_vocab - 1}")


def _forward(params: TransformerParams, tokens: np.ndarray, keep_cache: bool):
    config = params.config
    p = params.tensors
    _check_tokens(params, tokens)
    batch, seq = tokens.shape
    eps = config.ln_eps
    scale = 1.0 / np.sqrt(config.d_k)
    blocked = np.triu(np.ones((seq, seq), dtype=bool), k=1)

    x = p["tok_emb"][tokens] + p["pos_emb"][:seq]
    states = [x]
    caches = []
    for layer in range(config.n_layers):
        names = _layer_names(layer)
        h, ln1 = _layer_norm(x, p[names["ln1.g"]], p[names["ln1.b"]], eps)
        q = _split_heads(
            h @ p[names["attn.w_q"]] + p[names["attn.b_q"]], config.n_heads
        )
        k = _split_heads(
            h @ p[names["attn.w_k"]] + p[names["attn.b_k"]], config.n_heads
        )
        v = _split_heads(
            h @ p[names["attn.w_v"]] + p[names["attn.b_v"]], config.n_heads
        )
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(blocked, -np.inf, scores)
        att = _softmax(scores)
        ctx = _merge_heads(att @ v)
        z = x + ctx @ p[names["attn.w_o"]] + p[names["attn.b_o"]]

        h2, ln2 = _layer_norm(z, p[names["ln2.g"]], p[names["ln2.b"]], eps)
        u = h2 @ p[names["mlp.w_in"]] + p[names["mlp.b_in"]]
        m = _gelu(u)
        x = z + m @ p[names["mlp.w_out"]] + p[names["mlp.b_out"]]
        states.append(x)
        if keep_cache:
            caches.append((h, ln1, q, k, v, att, ctx, h2, ln2, u, m))

    last = x[:, -1, :]
    xf, ln_f = _layer_norm(last, p["ln_f.g"], p["ln_f.b"], eps)
    logits = xf @ params.head
    return logits, np.stack(states), (caches, xf, ln_f)


def tf_forward(
    params: TransformerParams, tokens: Sequence[int]
) -> tuple[np.ndarray, HiddenStates]:
    """
    Next-token logits at the last position of one sequence.

    :param params: Model parameters.
    :param tokens: Token ids, at most ``context`` of them.
    :returns: (logits over the full vocabulary, hidden states).
    :raises SequenceTooLong: If the sequence exceeds the context.
    :raises UnknownToken: If an id is outside the vocabulary.
    """
    array = np.asarray([list(tokens)], dtype=np.intp)
    logits, states, _ = _forward(params, array, keep_cache=False)
    return logits[0], HiddenStates(states)


def extract_hidden(params: TransformerParams, tokens: Sequence[int]) -> np.ndarray:
    """Residual stream at the last position for every layer boundary, (L+1, d_m)."""
    _, hidden = tf_forward(params, tokens)
    return hidden.final_position()[:, 0, :]


def _backward(
    params: TransformerParams,
    tokens: np.ndarray,
    d_logits: np.ndarray,
    cache,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for ``d_logits`` (batch, d_vocab) into grads."""
    config = params.config
    p = params.tensors
    caches, xf, ln_f = cache
    batch, seq = tokens.shape
    scale = 1.0 / np.sqrt(config.d_k)

    d_xf = d_logits @ params.head.T
    if config.tie_embeddings:
        grads["tok_emb"] += d_logits.T @ xf
    else:
        grads["lm_head"] += xf.T @ d_logits
    d_last, dg, db = _layer_norm_backward(d_xf, ln_f)
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    dx = np.zeros((batch, seq, config.d_m))
    dx[:, -1, :] = d_last
    for layer in reversed(range(config.n_layers)):
        names = _layer_names(layer)
        h, ln1, q, k, v, att, ctx, h2, ln2, u, m = caches[layer]

        # MLP branch, X' = Z + MLP(LN(Z))
        grads[names["mlp.w_out"]] += np.einsum("bsi,bsj->ij", m, dx)
        grads[names["mlp.b_out"]] += dx.sum(axis=(0, 1))
        du = (dx @ p[names["mlp.w_out"]].T) * _gelu_grad(u)
        grads[names["mlp.w_in"]] += np.einsum("bsi,bsj->ij", h2, du)
        grads[names["mlp.b_in"]] += du.sum(axis=(0, 1))
        dh2, dg, db = _layer_norm_backward(du @ p[names["mlp.w_in"]].T, ln2)
        grads[names["ln2.g"]] += dg
        grads[names["ln2.b"]] += db
        dz = dx + dh2

        # attention branch, Z = X + MHA(LN(X))
        grads[names["attn.w_o"]] += np.einsum("bsi,bsj->ij", ctx, dz)
        grads[names["attn.b_o"]] += dz.sum(axis=(0, 1))
        d_ctx = _split_heads(dz @ p[names["attn.w_o"]].T, config.n_heads)
        d_att = d_ctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = att * (d_att - (d_att * att).sum(axis=-1, keepdims=True)) * scale
        dq = d_scores @ k
        dk = d_scores.transpose(0, 1, 3, 2) @ q
        dh = np.zeros_like(h)
        for proj, d_proj in (("q", dq), ("k", dk), ("v", dv)):
            d_proj = _merge_heads(d_proj)
            grads[names[f"attn.w_{proj}"]] += np.einsum("bsi,bsj->ij", h, d_proj)
            grads[names[f"attn.b_{proj}"]] += d_proj.sum(axis=(0, 1))
            dh += d_proj @ p[names[f"attn.w_{proj}"]].T
        d_in, dg, db = _layer_norm_backward(dh, ln1)
        grads[names["ln1.g"]] += dg
        grads[names["ln1.b"]] += db
        dx = dz + d_in

    np.add.at(grads["tok_emb"], tokens, dx)
    grads["pos_emb"][:seq] += dx.sum(axis=0)


def _group_by_length(
    batch: Sequence[Example],
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    groups: dict[int, list[Example]] = {}
    for ex in batch:
        groups.setdefault(len(ex.tokens), []).append(ex)
    return {
        length: (
            np.array([ex.tokens for ex in rows], dtype=np.intp),
            np.array([ex.target for ex in rows], dtype=np.intp),
        )
        for length, rows in sorted(groups.items())
    }


def tf_loss_and_grads(
    params: TransformerParams, batch: Sequence[Example], weight_decay: float = 0.0
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Mean cross-entropy of the last-position prediction, plus
    ``weight_decay / 2`` times the squared norm of every decayed tensor.

    :returns: (loss, gradient per named tensor).
    :raises NumericalOverflow: If the loss is not finite.
    :raises InvalidConfig: On an empty batch.
    """
    if not batch:
        raise InvalidConfig("Batch must not be empty")
    grads = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    total = 0.0
    for tokens, targets in _group_by_length(batch).values():
        logits, _, cache = _forward(params, tokens, keep_cache=True)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        norm = exp.sum(axis=1, keepdims=True)
        rows = np.arange(len(targets))
        total -= float((shifted[rows, targets] - np.log(norm[:, 0])).sum())
        d_logits = exp / norm
        d_logits[rows, targets] -= 1.0
        _backward(params, tokens, d_logits / len(batch), cache, grads)

    loss = total / len(batch)
    if not np.isfinite(loss):
        raise NumericalOverflow()
    if weight_decay:
        for name, tensor in params.tensors.items():
            if decayed(name):
                loss += 0.5 * weight_decay * float(np.sum(tensor**2))
                grads[name] += weight_decay * tensor
    return loss, grads


def batch_logits(params: TransformerParams, examples: Sequence[Example]) -> np.ndarray:
    """Last-position logits per example, in input order."""
    out = np.empty((len(examples), params.config.d_vocab))
    by_length: dict[int, list[int]] = {}
    for pos, ex in enumerate(examples):
        by_length.setdefault(len(ex.tokens), []).append(pos)
    for positions in by_length.values():
        tokens = np.array([examples[i].tokens for i in positions], dtype=np.intp)
        logits, _, _ = _forward(params, tokens, keep_cache=False)
        out[positions] = logits
    return out


def tf_accuracy(params: TransformerParams, examples: Sequence[Example]) -> float:
    if not examples:
        return 0.0
    logits = batch_logits(params, examples)
    targets = np.array([ex.target for ex in examples])
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def tf_min_margin(params: TransformerParams, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    logits = batch_logits(params, examples)
    rows = np.arange(len(examples))
    targets = np.array([ex.target for ex in examples])
    correct = logits[rows, targets].copy()
    logits[rows, targets] = -np.inf
    return float(np.min(correct - logits.max(axis=1)))


def first_hop_pairs(dataset: Dataset) -> list[tuple[tuple[int, ...], int]]:
    """(first-hop input tokens, bridge token) for every first-hop training row."""
    return [
        (ex.tokens, ex.target)
        for ex in dataset.train
        if ex.kind is ExampleKind.ONE_HOP_FIRST
    ]


def hidden_alignment(
    params: TransformerParams,
    pairs: Sequence[tuple[Sequence[int], int]],
    center: bool = True,
) -> np.ndarray:
    """
    Cosine similarity, per pair and layer boundary, between the last-position
    state of the first-hop input and the state of the lone bridge token.

    With ``center`` and at least two pairs, each side is first centered on its
    own mean over the pairs, layer by layer, so that a direction shared by all
    states does not count as alignment.

    :returns: Array (len(pairs), L+1).
    """
    if not pairs:
        return np.zeros((0, params.config.n_layers + 1))
    queries = [
        Example(tuple(tokens), 0, ExampleKind.ONE_HOP_FIRST) for tokens, _ in pairs
    ]
    bridges = [Example((bridge,), 0, ExampleKind.ZERO_HOP) for _, bridge in pairs]
    left = _final_states(params, queries)
    right = _final_states(params, bridges)
    if center and len(pairs) > 1:
        left = left - left.mean(axis=0)
        right = right - right.mean(axis=0)
    dots = np.einsum("pld,pld->pl", left, right)
    norms = np.linalg.norm(left, axis=-1) * np.linalg.norm(right, axis=-1)
    return np.clip(dots / np.maximum(norms, 1e-300), -1.0, 1.0)


def _final_states(params: TransformerParams, examples: Sequence[Example]) -> np.ndarray:
    out = np.empty((len(examples), params.config.n_layers + 1, params.config.d_m))
    by_length: dict[int, list[int]] = {}
    for pos, ex in enumerate(examples):
        by_length.setdefault(len(ex.tokens), []).append(pos)
    for positions in by_length.values():
        tokens = np.array([examples[i].tokens for i in positions], dtype=np.intp)
        _, states, _ = _forward(params, tokens, keep_cache=False)
        out[positions] = states[:, :, -1, :].transpose(1, 0, 2)
    return out


def default_config(dataset: Dataset, **overrides: Any) -> TransformerConfig:
    return TransformerConfig(d_vocab=dataset.layout.vocab_size, **overrides)


@timed
def tf_train(
    dataset: Dataset,
    config: TransformerConfig,
    train_config: TrainConfig,
) -> tuple[TransformerParams, TrainTrace]:
    """
    Full-batch training on ``dataset.train`` with the configured optimizer.

    Every logged row carries OOD accuracy, the smallest OOD margin and the
    last-layer alignment between first-hop inputs and their bridge tokens.

    :raises Diverged: If the loss becomes non-finite.
    :raises InvalidConfig: If the dataset has no training rows.
    """
    config.validate()
    train_config.validate()
    if not dataset.train:
        raise InvalidConfig("Dataset has no training rows")
    if config.d_vocab != dataset.layout.vocab_size:
        raise InvalidConfig(
            f"d_vocab {config.d_vocab} does not match the dataset vocabulary "
            f"({dataset.layout.vocab_size})"
        )
    params = init_tf_params(config, train_config.seed)
    optimizer = make_optimizer(train_config)
    stop = StopRule(train_config)
    trace = TrainTrace()
    pairs = first_hop_pairs(dataset)

    step = 0
    while True:
        try:
            loss, grads = tf_loss_and_grads(
                params, dataset.train, train_config.weight_decay
            )
        except NumericalOverflow:
            loss = float("nan")
        check_finite(loss, step)
        train_acc = tf_accuracy(params, dataset.train)
        finished = stop.done(step, loss, train_acc)
        if finished or step % train_config.log_every == 0:
            row = TraceRow(
                step,
                loss,
                train_acc,
                tf_accuracy(params, dataset.test_ood),
                tf_min_margin(params, dataset.test_ood),
                float(hidden_alignment(params, pairs)[:, -1].mean()) if pairs else None,
            )
            trace.append(row)
            _LOGGER.debug(f"step {step}: {row}")
        if finished:
            break
        optimizer.step(params.tensors, grads)
        step += 1

    final = trace.final
    _LOGGER.info(
        f"Transformer trained {step} steps: loss {final.loss:.3g}, "
        f"train acc {final.train_acc:.3f}, OOD acc {final.ood_acc:.3f}"
    )
    return params, trace


def hidden_csv(params: TransformerParams, tokens: Sequence[int]) -> str:
    """Hidden-state dump as CSV rows (layer, position, dim, value)."""
    _, hidden = tf_forward(params, tokens)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("layer", "position", "dim", "value"))
    for layer, position, dim in np.ndindex(*hidden.states[:, 0].shape):
        value = hidden.states[layer, 0, position, dim]
        writer.writerow((layer, position, dim, repr(float(value))))
    return buf.getvalue()
