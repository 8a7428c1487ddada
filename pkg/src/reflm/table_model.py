"""Reference-to-databases model: hierarchical dialogue encoder (sentence and
turn LSTMs), a decoder with optional attention over the previous utterance,
and a table pointer that factors a joint copy distribution over cells as
attribute -> row -> column attention followed by an outer product."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers, numcore as nc
from .layers import LstmState
from .numcore import Tensor
from .recipe_model import (MixtureStep, TokenScore, _finish_step, check_mode,
                           token_nll_latent, token_nll_supervised, token_nll_vocab)

MACHINE = "M"
USER = "U"


@dataclass
class DatabaseTable:
    """R x C grid of single-token cells plus one attribute token per column.

    Multi-token cells are collapsed to per-row special tokens and empty cells
    hold the EMPTY token before the table reaches the model (see corpus).
    """

    attributes: list[int]
    cells: list[list[int]]
    attribute_surfaces: list[str] = field(default_factory=list)
    cell_surfaces: list[list[str]] = field(default_factory=list)

    @property
    def num_rows(self) -> int:
        return len(self.cells)

    @property
    def num_columns(self) -> int:
        return len(self.attributes)

    def validate(self) -> None:
        if self.num_rows < 1 or self.num_columns < 1:
            raise ValueError("table: needs at least one row and one column")
        for r, row in enumerate(self.cells):
            if len(row) != self.num_columns:
                raise ValueError(f"table: row {r} has {len(row)} cells, "
                                 f"expected {self.num_columns}")

    def matching_cells(self, token_id: int) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.cells)
                for c, cell in enumerate(row) if cell == token_id]


@dataclass
class DialogueExample:
    """Alternating machine/user token sequences over one database table.

    ``machine_labels[m][v]`` is the copy decision for token v of the m-th
    machine utterance and ``machine_candidates[m][v]`` the cells whose
    (collapsed) surface form matches that token; the copy probability of a
    token is the total pointer mass over all its matching cells.  Candidates
    are matched on surfaces upstream so that out-of-vocabulary cell tokens,
    which all share the UNK id, keep distinct candidate sets.
    """

    turns: list[tuple[str, list[int]]]
    machine_labels: list[list[int]]
    machine_candidates: list[list[list[tuple[int, int]]]]
    turn_surfaces: list[list[str]] = field(default_factory=list)

    def machine_turns(self) -> list[tuple[int, list[int]]]:
        return [(t, tokens) for t, (speaker, tokens) in enumerate(self.turns)
                if speaker == MACHINE]

    def validate(self, table: DatabaseTable) -> None:
        if not self.turns:
            raise ValueError("dialogue: no turns")
        for t, (speaker, tokens) in enumerate(self.turns):
            expected = MACHINE if t % 2 == 0 else USER
            if speaker != expected:
                raise ValueError(
                    f"dialogue: turn {t} spoken by {speaker!r}, expected {expected!r} "
                    "(must alternate starting with the machine)")
            if not tokens:
                raise ValueError(f"dialogue: turn {t} is empty")
        machine = self.machine_turns()
        if not (len(self.machine_labels) == len(self.machine_candidates) == len(machine)):
            raise ValueError("dialogue: one label/candidate row per machine utterance required")
        for m, (_, tokens) in enumerate(machine):
            labels = self.machine_labels[m]
            cand_rows = self.machine_candidates[m]
            if len(labels) != len(tokens) or len(cand_rows) != len(tokens):
                raise ValueError(f"dialogue: label row {m} out of alignment")
            for v, (z, cands) in enumerate(zip(labels, cand_rows)):
                if z == 1 and not cands:
                    raise ValueError(
                        f"dialogue: machine token {v} of utterance {m} labeled copy "
                        "but matches no table cell")
                for r, c in cands:
                    if not (0 <= r < table.num_rows and 0 <= c < table.num_columns):
                        raise ValueError(
                            f"dialogue: candidate cell ({r}, {c}) outside the table")


@dataclass
class EncodedTable:
    attr_vectors: list[Tensor]          # one per column
    cell_encodings: list[list[Tensor]]  # row-major grid, one per cell

    @property
    def num_rows(self) -> int:
        return len(self.cell_encodings)

    @property
    def num_columns(self) -> int:
        return len(self.attr_vectors)


@dataclass
class TablePointerState:
    """The factored cell distribution: p_copy[r, c] = p_row[r] * p_col[c]."""

    p_attr: Tensor
    p_row: Tensor
    p_col: Tensor
    p_copy: Tensor  # [R, C]


class TableModel:
    """Parameters and forward passes of the table-pointer dialogue model."""

    def __init__(self, vocab_size: int, bos_id: int, eos_id: int,
                 embed_dim: int, hidden_dim: int, attention_dim: int,
                 rng: np.random.Generator, name: str = "table"):
        self.vocab_size = vocab_size
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.hidden_dim = hidden_dim
        self.name = name
        self.embedding = layers.embedding_table(vocab_size, embed_dim, rng,
                                                f"{name}.embedding")
        self.sentence_encoder = layers.lstm_params(embed_dim, hidden_dim, rng,
                                                   f"{name}.sentence_encoder")
        self.turn_encoder = layers.lstm_params(hidden_dim, hidden_dim, rng,
                                               f"{name}.turn_encoder")
        self.decoder = layers.lstm_params(embed_dim, hidden_dim, rng, f"{name}.decoder")
        # initial turn summary used before any history exists
        self.initial_turn_state = layers._uniform(rng, hidden_dim,
                                                  f"{name}.initial_turn_state")
        # cell encoder: e = tanh(W [cell embedding, attribute vector])
        self.w_cell = layers._uniform(rng, (hidden_dim, 2 * embed_dim), f"{name}.w_cell")
        # independent attention parameters for each pointer stage
        self.attr_attention = layers.attention_params(embed_dim, hidden_dim,
                                                      attention_dim, rng,
                                                      f"{name}.attr_attention")
        self.row_attention = layers.attention_params(hidden_dim, hidden_dim,
                                                     attention_dim, rng,
                                                     f"{name}.row_attention")
        self.col_attention = layers.attention_params(hidden_dim, hidden_dim,
                                                     attention_dim, rng,
                                                     f"{name}.col_attention")
        self.sentence_attention = layers.attention_params(hidden_dim, hidden_dim,
                                                          attention_dim, rng,
                                                          f"{name}.sentence_attention")
        self.w_switch = layers._uniform(rng, hidden_dim, f"{name}.w_switch")
        self.w_vocab = layers._uniform(rng, (vocab_size, hidden_dim), f"{name}.w_vocab")
        # additive contributions of the previous-turn context; equivalent to
        # concatenating the context into both projections
        self.w_switch_context = layers._uniform(rng, hidden_dim,
                                                f"{name}.w_switch_context")
        self.w_vocab_context = layers._uniform(rng, (vocab_size, hidden_dim),
                                               f"{name}.w_vocab_context")

    def named_params(self) -> dict[str, Tensor]:
        n = self.name
        params = {}
        params.update(self.embedding.named(f"{n}.embedding"))
        params.update(self.sentence_encoder.named(f"{n}.sentence_encoder"))
        params.update(self.turn_encoder.named(f"{n}.turn_encoder"))
        params.update(self.decoder.named(f"{n}.decoder"))
        params.update(self.attr_attention.named(f"{n}.attr_attention"))
        params.update(self.row_attention.named(f"{n}.row_attention"))
        params.update(self.col_attention.named(f"{n}.col_attention"))
        params.update(self.sentence_attention.named(f"{n}.sentence_attention"))
        params[f"{n}.initial_turn_state"] = self.initial_turn_state
        params[f"{n}.w_cell"] = self.w_cell
        params[f"{n}.w_switch"] = self.w_switch
        params[f"{n}.w_vocab"] = self.w_vocab
        params[f"{n}.w_switch_context"] = self.w_switch_context
        params[f"{n}.w_vocab_context"] = self.w_vocab_context
        return params

    # -- table side ---------------------------------------------------------

    def encode_table(self, table: DatabaseTable) -> EncodedTable:
        """Attribute vectors by embedding lookup; cells encode with their column."""
        table.validate()
        attr_vectors = [self.embedding.lookup(a) for a in table.attributes]
        cell_encodings = []
        for row in table.cells:
            encoded_row = []
            for c, cell in enumerate(row):
                pair = nc.concat(self.embedding.lookup(cell), attr_vectors[c])
                encoded_row.append(nc.tanh(nc.matvec(self.w_cell, pair)))
            cell_encodings.append(encoded_row)
        return EncodedTable(attr_vectors, cell_encodings)

    def table_pointer(self, encoded: EncodedTable, query: Tensor) -> TablePointerState:
        """Attribute, row, and column attention composed into a cell distribution.

        Each stage has its own attention parameters; the final distribution is
        the outer product of the row and column attentions.
        """
        p_attr = layers.attend(self.attr_attention, encoded.attr_vectors, query)
        row_summaries = [nc.weighted_sum(p_attr, nc.stack(*row))
                         for row in encoded.cell_encodings]
        p_row = layers.attend(self.row_attention, row_summaries, query)
        columns = [nc.stack(*(encoded.cell_encodings[r][c]
                              for r in range(encoded.num_rows)))
                   for c in range(encoded.num_columns)]
        col_summaries = [nc.weighted_sum(p_row, col) for col in columns]
        p_col = layers.attend(self.col_attention, col_summaries, query)
        p_copy = nc.outer(p_row, p_col)
        return TablePointerState(p_attr, p_row, p_col, p_copy)

    # -- dialogue side ------------------------------------------------------

    def encode_history(self, turns) -> tuple[Tensor, list[Tensor] | None]:
        """Hierarchical encoding of every utterance before the current one.

        Returns the turn-level summary (a learned initial vector when there
        is no history) and the token states of the immediately previous
        utterance for the optional sentence attention.
        """
        turns = list(turns)
        if not turns:
            return self.initial_turn_state, None
        summaries = []
        prev_token_states: list[Tensor] = []
        for _, tokens in turns:
            hiddens, final = layers.encode_sequence(self.sentence_encoder,
                                                    self.embedding, tokens)
            summaries.append(final.hidden)
            prev_token_states = hiddens
        state = layers.zero_state(self.turn_encoder.hidden_dim)
        for summary in summaries:
            state = layers.lstm_step(self.turn_encoder, summary, state)
        return state.hidden, prev_token_states

    def decode_start(self, turn_summary: Tensor) -> LstmState:
        """The decoder starts each machine utterance from the turn summary."""
        return LstmState(turn_summary, Tensor(np.zeros(self.hidden_dim)))

    def dialogue_decode_step(self, prev_token: int, prev_state: LstmState,
                             encoded_table: EncodedTable,
                             prev_turn_states: list[Tensor] | None,
                             use_sentence_attention: bool,
                             ) -> tuple[MixtureStep, TablePointerState]:
        """One decoder step: switch and vocab heads condition on the state
        (plus the previous-turn context when sentence attention is on); the
        table pointer is queried with the same state."""
        state = layers.lstm_step(self.decoder, self.embedding.lookup(prev_token),
                                 prev_state)
        switch_logit = nc.dot(self.w_switch, state.hidden)
        vocab_logits = nc.matvec(self.w_vocab, state.hidden)
        context = Tensor(np.zeros(self.hidden_dim))
        if use_sentence_attention and prev_turn_states:
            sentence_probs = layers.attend(self.sentence_attention,
                                           prev_turn_states, state.hidden)
            context = layers.attention_context(sentence_probs, prev_turn_states)
            switch_logit = nc.add(switch_logit,
                                  nc.dot(self.w_switch_context, context))
            vocab_logits = nc.add(vocab_logits,
                                  nc.matvec(self.w_vocab_context, context))
        pointer = self.table_pointer(encoded_table, state.hidden)
        flat_copy = nc.reshape(pointer.p_copy,
                               (encoded_table.num_rows * encoded_table.num_columns,))
        step = _finish_step(state, context, flat_copy, vocab_logits, switch_logit)
        return step, pointer

    @staticmethod
    def flatten_cells(table: DatabaseTable, cells) -> list[int]:
        cols = table.num_columns
        return [r * cols + c for r, c in cells]

    def _steps(self, example: DialogueExample, table: DatabaseTable,
               use_sentence_attention: bool):
        """Teacher-forced pass over all machine utterances.

        Yields (step, pointer, target, z, flat candidates, utterance index,
        step index); each utterance is scored through its EOS, always a
        vocabulary event.
        """
        encoded = self.encode_table(table)
        for m, (turn_index, tokens) in enumerate(example.machine_turns()):
            summary, prev_states = self.encode_history(example.turns[:turn_index])
            state = self.decode_start(summary)
            targets = list(tokens) + [self.eos_id]
            labels = list(example.machine_labels[m]) + [0]
            candidate_rows = [self.flatten_cells(table, cells)
                              for cells in example.machine_candidates[m]] + [[]]
            prev_tokens = [self.bos_id] + list(tokens)
            for v, (prev, target, z, cands) in enumerate(
                    zip(prev_tokens, targets, labels, candidate_rows)):
                step, pointer = self.dialogue_decode_step(
                    prev, state, encoded, prev_states, use_sentence_attention)
                yield step, pointer, target, z, cands, m, v
                state = step.state

    def dialogue_nll(self, example: DialogueExample, table: DatabaseTable,
                     mode: str, use_sentence_attention: bool = False) -> Tensor:
        """Teacher-forced NLL summed over all machine tokens of all turns."""
        check_mode(mode)
        total = None
        for step, _, target, z, cands, _, _ in self._steps(example, table,
                                                           use_sentence_attention):
            if mode == "supervised":
                nll = token_nll_supervised(step, target, z, cands)
            elif mode == "latent":
                nll = token_nll_latent(step, target, cands)
            else:
                nll = token_nll_vocab(step, target)
            total = nll if total is None else nc.add(total, nll)
        return total

    def score_tokens(self, example: DialogueExample, table: DatabaseTable,
                     use_sentence_attention: bool = False) -> list[TokenScore]:
        """Per-token mixture quantities for evaluation (run without a tape)."""
        scores = []
        for step, _, target, z, cands, _, _ in self._steps(example, table,
                                                           use_sentence_attention):
            copy_prob = float(step.copy_probs.data[cands].sum()) if cands else 0.0
            scores.append(TokenScore(
                target=target,
                vocab_prob=float(step.vocab_probs.data[target]),
                copy_prob=copy_prob,
                switch_prob=float(step.switch_prob.data),
                label=z,
                has_candidates=bool(cands),
            ))
        return scores
