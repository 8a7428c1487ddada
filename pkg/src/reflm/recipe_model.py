"""Reference-to-lists model: encode each ingredient, decode the recipe with
attention over all ingredient token states, and combine copy and vocabulary
distributions through a stochastic switch.

The switch can be trained supervised (switch labels from string matching) or
with the switch marginalized out as a latent variable; a third "vocab" mode
scores the vocabulary softmax alone and serves as the no-copy baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers, numcore as nc
from .layers import LstmState
from .numcore import Tensor

LOG_FLOOR = 1e-12  # keeps supervised training finite when the switch saturates

MODES = ("supervised", "latent", "vocab")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class RecipeExample:
    """One (ingredient list, recipe) pair with copy supervision.

    ``copy_candidates[v]`` holds every (ingredient, position) whose surface
    form string-matches recipe token v; ``copy_labels[v]`` is 1 iff that set
    is non-empty.
    """

    ingredients: list[list[int]]
    recipe: list[int]
    copy_labels: list[int]
    copy_candidates: list[list[tuple[int, int]]]
    ingredient_surfaces: list[list[str]] = field(default_factory=list)
    recipe_surfaces: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not self.ingredients or any(len(t) == 0 for t in self.ingredients):
            raise ValueError("recipe example: ingredients must be non-empty")
        if not (len(self.recipe) == len(self.copy_labels) == len(self.copy_candidates)):
            raise ValueError("recipe example: per-token fields out of alignment")
        for v, (z, cands) in enumerate(zip(self.copy_labels, self.copy_candidates)):
            if z == 1 and not cands:
                raise ValueError(f"recipe example: token {v} labeled copy but has no candidates")
            for i, j in cands:
                if not (0 <= i < len(self.ingredients) and 0 <= j < len(self.ingredients[i])):
                    raise ValueError(f"recipe example: candidate ({i}, {j}) out of range")


@dataclass
class MixtureStep:
    """One decoding step: state, attention context, and both output heads."""

    state: LstmState
    context: Tensor
    copy_probs: Tensor     # distribution over referable positions
    vocab_logits: Tensor
    switch_logit: Tensor   # 0-d; switch probability = sigmoid(switch_logit)
    vocab_probs: Tensor
    switch_prob: Tensor


@dataclass
class IngredientEncoding:
    token_states: list[Tensor]            # flattened over ingredients, in order
    positions: list[tuple[int, int]]      # flat index -> (ingredient, token)
    offsets: list[int]                    # per-ingredient start in the flat list
    init_state: LstmState

    def flat_index(self, ingredient: int, position: int) -> int:
        return self.offsets[ingredient] + position


def _finish_step(state: LstmState, context: Tensor, copy_probs: Tensor,
                 vocab_logits: Tensor, switch_logit: Tensor) -> MixtureStep:
    return MixtureStep(
        state=state, context=context, copy_probs=copy_probs,
        vocab_logits=vocab_logits, switch_logit=switch_logit,
        vocab_probs=nc.softmax(vocab_logits),
        switch_prob=nc.sigmoid(switch_logit),
    )


# ---------------------------------------------------------------------------
# per-token mixture likelihoods (shared with the table model)
# ---------------------------------------------------------------------------

def _log_switch_on(step: MixtureStep) -> Tensor:
    return nc.log_sigmoid(step.switch_logit)


def _log_switch_off(step: MixtureStep) -> Tensor:
    return nc.log_sigmoid(nc.scale(step.switch_logit, -1.0))


def _log_copy_mass(step: MixtureStep, candidates) -> Tensor:
    mass = nc.take_sum(step.copy_probs, candidates)
    return nc.log(nc.clamp_min(mass, LOG_FLOOR))


def _log_vocab(step: MixtureStep, target: int) -> Tensor:
    return nc.index(nc.log_softmax(step.vocab_logits), target)


def token_nll_supervised(step: MixtureStep, target: int, z: int, candidates) -> Tensor:
    """-log p(target, z): the joint of the word and the observed switch."""
    if z == 1:
        if not candidates:
            raise ValueError("supervised copy token has no copy candidates (corpus bug)")
        ll = nc.add(_log_copy_mass(step, candidates), _log_switch_on(step))
    else:
        ll = nc.add(_log_vocab(step, target), _log_switch_off(step))
    return nc.scale(ll, -1.0)


def token_nll_latent(step: MixtureStep, target: int, candidates) -> Tensor:
    """-log p(target) with the switch summed out.

    Without string-match candidates the copy branch has zero mass and the
    marginal reduces exactly to the vocabulary branch.
    """
    vocab_branch = nc.add(_log_vocab(step, target), _log_switch_off(step))
    if not candidates:
        return nc.scale(vocab_branch, -1.0)
    copy_branch = nc.add(_log_copy_mass(step, candidates), _log_switch_on(step))
    return nc.scale(nc.logaddexp(vocab_branch, copy_branch), -1.0)


def token_nll_vocab(step: MixtureStep, target: int) -> Tensor:
    """-log p(target) under the vocabulary softmax alone (no-copy baseline)."""
    return nc.scale(_log_vocab(step, target), -1.0)


@dataclass
class TokenScore:
    """Frozen per-token quantities needed to score any mode without the tape."""

    target: int
    vocab_prob: float    # probability of the target id under the softmax head
    copy_prob: float     # total copy mass on string-match candidates (0 if none)
    switch_prob: float
    label: int | None    # observed switch, when the corpus provides one
    has_candidates: bool


def token_probability(score: TokenScore, mode: str, oov_spread: float = 1.0) -> float:
    """Decision-chain probability of one token under the given mode.

    ``oov_spread`` divides the vocabulary-branch probability when the target
    surface is out of vocabulary and its id was forced to UNK: the UNK mass
    is split evenly over the distinct unseen surface forms of the evaluation
    corpus, so closed-vocabulary models stay comparable on tokens only a
    pointer can produce.
    """
    check_mode(mode)
    vocab_prob = score.vocab_prob / oov_spread
    if mode == "vocab":
        return vocab_prob
    on, off = score.switch_prob, 1.0 - score.switch_prob
    if mode == "latent":
        return vocab_prob * off + score.copy_prob * on
    if score.label is None:
        raise ValueError("supervised scoring needs switch labels")
    return score.copy_prob * on if score.label == 1 else vocab_prob * off


class RecipeModel:
    """Parameters and forward passes of the list-pointer mixture model."""

    def __init__(self, vocab_size: int, bos_id: int, eos_id: int,
                 embed_dim: int, hidden_dim: int, attention_dim: int,
                 rng: np.random.Generator, name: str = "recipe"):
        self.vocab_size = vocab_size
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.hidden_dim = hidden_dim
        self.name = name
        self.embedding = layers.embedding_table(vocab_size, embed_dim, rng,
                                                f"{name}.embedding")
        self.encoder = layers.lstm_params(embed_dim, hidden_dim, rng, f"{name}.encoder")
        # decoder consumes [prev embedding, prev attention context]
        self.decoder = layers.lstm_params(embed_dim + hidden_dim, hidden_dim, rng,
                                          f"{name}.decoder")
        self.attention = layers.attention_params(hidden_dim, hidden_dim, attention_dim,
                                                 rng, f"{name}.attention")
        self.w_switch = layers._uniform(rng, 2 * hidden_dim, f"{name}.w_switch")
        self.w_vocab = layers._uniform(rng, (vocab_size, 2 * hidden_dim),
                                       f"{name}.w_vocab")

    def named_params(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.embedding.named(f"{self.name}.embedding"))
        params.update(self.encoder.named(f"{self.name}.encoder"))
        params.update(self.decoder.named(f"{self.name}.decoder"))
        params.update(self.attention.named(f"{self.name}.attention"))
        params[f"{self.name}.w_switch"] = self.w_switch
        params[f"{self.name}.w_vocab"] = self.w_vocab
        return params

    def encode_ingredients(self, ingredients) -> IngredientEncoding:
        """Encode each ingredient independently with the shared encoder.

        The decoder starts from the sum of the per-ingredient final states,
        which makes the initial state invariant to ingredient order.
        """
        ingredients = list(ingredients)
        if not ingredients:
            raise ValueError("encode_ingredients: empty ingredient list")
        token_states: list[Tensor] = []
        positions: list[tuple[int, int]] = []
        offsets: list[int] = []
        init: LstmState | None = None
        for i, tokens in enumerate(ingredients):
            offsets.append(len(token_states))
            hiddens, final = layers.encode_sequence(self.encoder, self.embedding, tokens)
            token_states.extend(hiddens)
            positions.extend((i, j) for j in range(len(hiddens)))
            init = final if init is None else layers.add_states(init, final)
        return IngredientEncoding(token_states, positions, offsets, init)

    def initial_context(self) -> Tensor:
        return Tensor(np.zeros(self.hidden_dim))

    def decode_step(self, prev_token: int, prev_state: LstmState, prev_context: Tensor,
                    token_states) -> MixtureStep:
        """Advance the decoder one token and produce both output heads.

        The copy distribution is attention over every ingredient token state;
        switch and vocabulary heads both condition on [state, context].
        """
        x = nc.concat(self.embedding.lookup(prev_token), prev_context)
        state = layers.lstm_step(self.decoder, x, prev_state)
        copy_probs = layers.attend(self.attention, token_states, state.hidden)
        context = layers.attention_context(copy_probs, token_states)
        combined = nc.concat(state.hidden, context)
        switch_logit = nc.dot(self.w_switch, combined)
        vocab_logits = nc.matvec(self.w_vocab, combined)
        return _finish_step(state, context, copy_probs, vocab_logits, switch_logit)

    def _steps(self, example: RecipeExample):
        """Teacher-forced pass; yields (step, target, z, flat candidates).

        Appends the end-of-sequence target, which is always a vocabulary
        event (z = 0, no candidates).
        """
        encoding = self.encode_ingredients(example.ingredients)
        targets = list(example.recipe) + [self.eos_id]
        labels = list(example.copy_labels) + [0]
        candidate_sets = [
            [encoding.flat_index(i, j) for i, j in cands]
            for cands in example.copy_candidates
        ] + [[]]
        prev_tokens = [self.bos_id] + list(example.recipe)
        state = encoding.init_state
        context = self.initial_context()
        for prev, target, z, cands in zip(prev_tokens, targets, labels, candidate_sets):
            step = self.decode_step(prev, state, context, encoding.token_states)
            yield step, target, z, cands
            state = step.state
            context = step.context

    def sequence_nll(self, example: RecipeExample, mode: str) -> Tensor:
        """Teacher-forced negative log likelihood of the recipe plus EOS."""
        check_mode(mode)
        total = None
        for step, target, z, cands in self._steps(example):
            if mode == "supervised":
                nll = token_nll_supervised(step, target, z, cands)
            elif mode == "latent":
                nll = token_nll_latent(step, target, cands)
            else:
                nll = token_nll_vocab(step, target)
            total = nll if total is None else nc.add(total, nll)
        return total

    def score_tokens(self, example: RecipeExample) -> list[TokenScore]:
        """Per-token mixture quantities for evaluation (run without a tape)."""
        scores = []
        for step, target, z, cands in self._steps(example):
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
