"""Reference-to-document-context model: a token-level LM that, before each
word, decides whether the word mentions an entity and which one, generates
the word conditioned on that entity's state, and keeps a dynamically growing
set of entity state vectors headed by a learned virtual empty entity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers, numcore as nc
from .numcore import Tensor
from .recipe_model import LOG_FLOOR

COREF_MODES = ("supervised", "vocab")


def check_coref_mode(mode: str) -> str:
    if mode not in COREF_MODES:
        raise ValueError(f"unknown coref mode {mode!r}; expected one of {COREF_MODES} "
                         "(the two-stage decision cannot be marginalized)")
    return mode


@dataclass
class AnnotatedDocument:
    """Token sequence with per-token mention annotations.

    ``mentions[i]`` is the entity id of token i or None.  Multi-token
    mentions are collapsed to single tokens upstream, and entity ids are
    dense (1, 2, ...) in order of first mention.
    """

    tokens: list[int]
    mentions: list[int | None]
    surfaces: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.tokens) != len(self.mentions):
            raise ValueError("document: tokens and mentions out of alignment")
        seen = 0
        for i, entity in enumerate(self.mentions):
            if entity is None:
                continue
            if entity < 1:
                raise ValueError(f"document: entity ids start at 1, got {entity}")
            if entity > seen + 1:
                raise ValueError(
                    f"document: token {i} mentions entity {entity} before entity "
                    f"{seen + 1} has appeared (ids must be dense in first-mention order)")
            seen = max(seen, entity)

    def entity_count(self) -> int:
        return len({e for e in self.mentions if e is not None})


class EntityStates:
    """Ordered entity state vectors; index 0 is the virtual empty entity."""

    def __init__(self, vectors: list[Tensor]):
        if not vectors:
            raise ValueError("entity states: must contain the virtual empty entity")
        self.vectors = vectors

    @property
    def size(self) -> int:
        return len(self.vectors)

    def updated(self, decision: tuple[int, int | None], hidden: Tensor) -> "EntityStates":
        """Next entity set after the decision at one step.

        z=0 leaves the set untouched; (z=1, v=0) appends a new entity holding
        the current state; (z=1, v>0) replaces entity v's state with it
        (latest-mention rule).
        """
        z, v = decision
        if z == 0:
            return EntityStates(list(self.vectors))
        if v is None or not 0 <= v < self.size:
            raise IndexError(f"entity update: slot {v} outside set of size {self.size}")
        vectors = list(self.vectors)
        if v == 0:
            vectors.append(hidden)
        else:
            vectors[v] = hidden
        return EntityStates(vectors)


def update_entities(entities: EntityStates, decision: tuple[int, int | None],
                    hidden: Tensor) -> EntityStates:
    return entities.updated(decision, hidden)


@dataclass
class CorefStep:
    """Pre-word prediction quantities at one position."""

    coref_probs: Tensor   # over the entity set, virtual entity first
    context: Tensor       # probability-weighted entity state
    switch_logit: Tensor
    switch_prob: Tensor


@dataclass
class CorefTokenScore:
    """Frozen per-token factors: total probability = word_prob * decision_prob."""

    target: int
    is_mention: bool
    word_prob: float
    decision_prob: float  # 1 in vocab mode; switch (and coref) factors otherwise


class CorefModel:
    """Parameters and forward passes of the entity-aware language model."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int,
                 attention_dim: int, rng: np.random.Generator, name: str = "coref"):
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.name = name
        self.embedding = layers.embedding_table(vocab_size, embed_dim, rng,
                                                f"{name}.embedding")
        self.lstm = layers.lstm_params(embed_dim, hidden_dim, rng, f"{name}.lstm")
        self.entity_attention = layers.attention_params(hidden_dim, hidden_dim,
                                                        attention_dim, rng,
                                                        f"{name}.entity_attention")
        self.w_switch = layers._uniform(rng, 2 * hidden_dim, f"{name}.w_switch")
        # shared output projection; entity-conditioned inputs pass through w_entity
        self.w_out = layers._uniform(rng, (vocab_size, hidden_dim), f"{name}.w_out")
        self.w_entity = layers._uniform(rng, (hidden_dim, 2 * hidden_dim),
                                        f"{name}.w_entity")
        self.empty_entity = layers._uniform(rng, hidden_dim, f"{name}.empty_entity")

    def named_params(self) -> dict[str, Tensor]:
        n = self.name
        params = {}
        params.update(self.embedding.named(f"{n}.embedding"))
        params.update(self.lstm.named(f"{n}.lstm"))
        params.update(self.entity_attention.named(f"{n}.entity_attention"))
        params[f"{n}.w_switch"] = self.w_switch
        params[f"{n}.w_out"] = self.w_out
        params[f"{n}.w_entity"] = self.w_entity
        params[f"{n}.empty_entity"] = self.empty_entity
        return params

    def lm_param_names(self) -> list[str]:
        """Parameters shared with a plain LM (used for warm starts)."""
        n = self.name
        names = [f"{n}.embedding.weight", f"{n}.w_out"]
        names.extend(self.lstm.named(f"{n}.lstm"))
        return names

    def fresh_entities(self) -> EntityStates:
        return EntityStates([self.empty_entity])

    def predict_step(self, h_prev: Tensor, entities: EntityStates) -> CorefStep:
        """Entity attention and switch computed before generating the word."""
        coref_probs = layers.attend(self.entity_attention, entities.vectors, h_prev)
        context = layers.attention_context(coref_probs, entities.vectors)
        switch_logit = nc.dot(self.w_switch, nc.concat(h_prev, context))
        return CorefStep(coref_probs, context, switch_logit, nc.sigmoid(switch_logit))

    def _word_logits_plain(self, h_prev: Tensor) -> Tensor:
        return nc.matvec(self.w_out, h_prev)

    def _word_logits_entity(self, h_prev: Tensor, entity_state: Tensor) -> Tensor:
        mixed = nc.tanh(nc.matvec(self.w_entity, nc.concat(h_prev, entity_state)))
        return nc.matvec(self.w_out, mixed)

    def token_prob(self, h_prev: Tensor, entities: EntityStates, target: int,
                   decision: tuple[int, int | None]) -> Tensor:
        """Joint probability of (decision, word) at one position."""
        z, v = decision
        step = self.predict_step(h_prev, entities)
        if z == 0:
            word = nc.index(nc.softmax(self._word_logits_plain(h_prev)), target)
            off = nc.sub(nc.Tensor(np.float64(1.0)), step.switch_prob)
            return nc.mul(word, off)
        if v is None or not 0 <= v < entities.size:
            raise IndexError(f"token_prob: entity slot {v} outside set of size {entities.size}")
        word = nc.index(nc.softmax(self._word_logits_entity(h_prev, entities.vectors[v])),
                        target)
        return nc.mul(nc.mul(word, nc.index(step.coref_probs, v)), step.switch_prob)

    def _walk(self, doc: AnnotatedDocument):
        """Shared document loop: yields the pre-word state and the annotated
        decision at each position, then consumes the token and updates
        entities with the realized hidden state."""
        doc.validate()
        state = layers.zero_state(self.hidden_dim)
        entities = self.fresh_entities()
        slot_of: dict[int, int] = {}
        for i, (token, annotation) in enumerate(zip(doc.tokens, doc.mentions)):
            if annotation is None:
                decision = (0, None)
            elif annotation in slot_of:
                decision = (1, slot_of[annotation])
            else:
                decision = (1, 0)  # first mention attends the virtual entity
            yield i, token, decision, state.hidden, entities
            state = layers.lstm_step(self.lstm, self.embedding.lookup(token), state)
            if decision[0] == 1:
                entities = entities.updated(decision, state.hidden)
                if annotation not in slot_of:
                    slot_of[annotation] = entities.size - 1

    def document_nll(self, doc: AnnotatedDocument, mode: str = "supervised") -> Tensor:
        """NLL of the full decision chain (or of words alone in vocab mode)."""
        check_coref_mode(mode)
        total = None
        for _, token, decision, h_prev, entities in self._walk(doc):
            word_ll = nc.index(nc.log_softmax(
                self._word_logits_plain(h_prev) if decision[0] == 0 or mode == "vocab"
                else self._word_logits_entity(h_prev, entities.vectors[decision[1]])),
                token)
            if mode == "vocab":
                ll = word_ll
            else:
                step = self.predict_step(h_prev, entities)
                if decision[0] == 0:
                    ll = nc.add(word_ll, nc.log_sigmoid(nc.scale(step.switch_logit, -1.0)))
                else:
                    coref_ll = nc.log(nc.clamp_min(
                        nc.index(step.coref_probs, decision[1]), LOG_FLOOR))
                    ll = nc.add(nc.add(word_ll, coref_ll),
                                nc.log_sigmoid(step.switch_logit))
            nll = nc.scale(ll, -1.0)
            total = nll if total is None else nc.add(total, nll)
        return total

    def final_entity_count(self, doc: AnnotatedDocument) -> int:
        count = 1
        for _, _, decision, _, _ in self._walk(doc):
            if decision == (1, 0):  # first mentions append to the set
                count += 1
        return count

    def score_tokens(self, doc: AnnotatedDocument, mode: str = "supervised",
                     ) -> list[CorefTokenScore]:
        """Per-token probability factors for evaluation (run without a tape)."""
        check_coref_mode(mode)
        scores = []
        for _, token, decision, h_prev, entities in self._walk(doc):
            if mode == "vocab" or decision[0] == 0:
                logits = self._word_logits_plain(h_prev)
            else:
                logits = self._word_logits_entity(h_prev, entities.vectors[decision[1]])
            word_prob = float(nc.softmax(logits).data[token])
            if mode == "vocab":
                decision_prob = 1.0
            else:
                step = self.predict_step(h_prev, entities)
                pi = float(step.switch_prob.data)
                if decision[0] == 0:
                    decision_prob = 1.0 - pi
                else:
                    decision_prob = pi * float(step.coref_probs.data[decision[1]])
            scores.append(CorefTokenScore(
                target=token,
                is_mention=decision[0] == 1,
                word_prob=word_prob,
                decision_prob=decision_prob,
            ))
        return scores

    def trace(self, doc: AnnotatedDocument):
        """Per-position coref distributions and switch probabilities, for
        heat-map export: yields (position, token, decision, coref probs,
        switch probability, entity count)."""
        for i, token, decision, h_prev, entities in self._walk(doc):
            step = self.predict_step(h_prev, entities)
            yield (i, token, decision, step.coref_probs.data.copy(),
                   float(step.switch_prob.data), entities.size)
