"""Shared neural building blocks: single-layer LSTM cell, sequence encoder,
embedding table, and additive attention over a set of vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .numcore import Tensor

INIT_SCALE = 0.1  # all weights uniform in [-INIT_SCALE, INIT_SCALE]
FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator, shape, name: str) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape),
                  requires_grad=True, name=name)


def _zeros(shape, name: str, fill: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=np.float64), requires_grad=True, name=name)


class LstmState(NamedTuple):
    hidden: Tensor
    cell: Tensor


def zero_state(hidden_dim: int) -> LstmState:
    return LstmState(Tensor(np.zeros(hidden_dim)), Tensor(np.zeros(hidden_dim)))


def add_states(a: LstmState, b: LstmState) -> LstmState:
    return LstmState(nc.add(a.hidden, b.hidden), nc.add(a.cell, b.cell))


@dataclass
class LstmParams:
    """Gate weights for a single-layer LSTM.

    Every gate matrix maps the concatenated [input, hidden] vector, so each
    has shape [hidden_dim, input_dim + hidden_dim].
    """

    input_dim: int
    hidden_dim: int
    w_input: Tensor
    w_forget: Tensor
    w_output: Tensor
    w_cell: Tensor
    b_input: Tensor
    b_forget: Tensor
    b_output: Tensor
    b_cell: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{field}": getattr(self, field)
                for field in ("w_input", "w_forget", "w_output", "w_cell",
                              "b_input", "b_forget", "b_output", "b_cell")}


def lstm_params(input_dim: int, hidden_dim: int, rng: np.random.Generator,
                name: str = "lstm") -> LstmParams:
    if input_dim <= 0 or hidden_dim <= 0:
        raise ValueError(f"lstm_params: dims must be positive, got {input_dim}, {hidden_dim}")
    width = input_dim + hidden_dim
    return LstmParams(
        input_dim=input_dim,
        hidden_dim=hidden_dim,
        w_input=_uniform(rng, (hidden_dim, width), f"{name}.w_input"),
        w_forget=_uniform(rng, (hidden_dim, width), f"{name}.w_forget"),
        w_output=_uniform(rng, (hidden_dim, width), f"{name}.w_output"),
        w_cell=_uniform(rng, (hidden_dim, width), f"{name}.w_cell"),
        b_input=_zeros(hidden_dim, f"{name}.b_input"),
        # forget gate opens at init so early gradients flow through the cell
        b_forget=_zeros(hidden_dim, f"{name}.b_forget", fill=FORGET_BIAS),
        b_output=_zeros(hidden_dim, f"{name}.b_output"),
        b_cell=_zeros(hidden_dim, f"{name}.b_cell"),
    )


def lstm_step(params: LstmParams, x: Tensor, state: LstmState) -> LstmState:
    """One step of the standard forget/input/output-gate LSTM (no peepholes)."""
    if x.shape != (params.input_dim,):
        nc._fail_shape("lstm_step.input", x.shape, (params.input_dim,))
    if state.hidden.shape != (params.hidden_dim,):
        nc._fail_shape("lstm_step.state", state.hidden.shape, (params.hidden_dim,))
    z = nc.concat(x, state.hidden)
    gate_i = nc.sigmoid(nc.add(nc.matvec(params.w_input, z), params.b_input))
    gate_f = nc.sigmoid(nc.add(nc.matvec(params.w_forget, z), params.b_forget))
    gate_o = nc.sigmoid(nc.add(nc.matvec(params.w_output, z), params.b_output))
    candidate = nc.tanh(nc.add(nc.matvec(params.w_cell, z), params.b_cell))
    cell = nc.add(nc.mul(gate_f, state.cell), nc.mul(gate_i, candidate))
    hidden = nc.mul(gate_o, nc.tanh(cell))
    return LstmState(hidden, cell)


@dataclass
class EmbeddingTable:
    vocab_size: int
    embed_dim: int
    weight: Tensor

    def lookup(self, token_id: int) -> Tensor:
        return nc.embedding(self.weight, token_id)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}


def embedding_table(vocab_size: int, embed_dim: int, rng: np.random.Generator,
                    name: str = "embedding") -> EmbeddingTable:
    if vocab_size <= 0 or embed_dim <= 0:
        raise ValueError(f"embedding_table: dims must be positive, got {vocab_size}, {embed_dim}")
    return EmbeddingTable(vocab_size, embed_dim,
                          _uniform(rng, (vocab_size, embed_dim), f"{name}.weight"))


def encode_sequence(params: LstmParams, emb: EmbeddingTable, tokens,
                    init: LstmState | None = None) -> tuple[list[Tensor], LstmState]:
    """Run the LSTM over token ids; returns per-token hiddens and final state."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("encode_sequence: empty token sequence (caller must filter)")
    state = init if init is not None else zero_state(params.hidden_dim)
    hiddens = []
    for tok in tokens:
        state = lstm_step(params, emb.lookup(tok), state)
        hiddens.append(state.hidden)
    return hiddens, state


@dataclass
class AttentionParams:
    """Additive attention: score_k = v . tanh(W_key h_k + W_query q)."""

    attention_dim: int
    w_key: Tensor
    w_query: Tensor
    v: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_key": self.w_key,
                f"{prefix}.w_query": self.w_query,
                f"{prefix}.v": self.v}


def attention_params(key_dim: int, query_dim: int, attention_dim: int,
                     rng: np.random.Generator, name: str = "attention") -> AttentionParams:
    if min(key_dim, query_dim, attention_dim) <= 0:
        raise ValueError("attention_params: dims must be positive")
    return AttentionParams(
        attention_dim=attention_dim,
        w_key=_uniform(rng, (attention_dim, key_dim), f"{name}.w_key"),
        w_query=_uniform(rng, (attention_dim, query_dim), f"{name}.w_query"),
        v=_uniform(rng, attention_dim, f"{name}.v"),
    )


def attention_scores(params: AttentionParams, vectors, query: Tensor) -> Tensor:
    vectors = list(vectors)
    if not vectors:
        raise ValueError("attend: empty vector set")
    projected_query = nc.matvec(params.w_query, query)
    keyed = [nc.tanh(nc.add(nc.matvec(params.w_key, h), projected_query))
             for h in vectors]
    return nc.matvec(nc.stack(*keyed), params.v)


def attend(params: AttentionParams, vectors, query: Tensor) -> Tensor:
    """Probability distribution over the given vectors, conditioned on query."""
    return nc.softmax(attention_scores(params, vectors, query))


def attention_context(probs: Tensor, vectors) -> Tensor:
    """Probability-weighted average of the attended vectors."""
    return nc.weighted_sum(probs, nc.stack(*vectors))
