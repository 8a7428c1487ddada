"""Data ingestion and preprocessing: vocabulary construction, string-match
copy labels for recipes, database special-token substitution for dialogues,
mention filtering for coreference documents, split/fold bookkeeping, and
deterministic synthetic fixture generation."""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .coref_model import AnnotatedDocument
from .recipe_model import RecipeExample
from .table_model import DatabaseTable, DialogueExample

log = logging.getLogger(__name__)

UNK, BOS, EOS, EMPTY = "_unk", "_bos", "_eos", "_empty"
RESERVED = (UNK, BOS, EOS, EMPTY)

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.json"
SPLITS = ("train", "valid", "test")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

# attribute headers whose cells collapse to per-row special tokens
_SPECIAL_COLUMNS = {
    "name": "_name_",
    "address": "_addr_",
    "addr": "_addr_",
    "post code": "_postcode_",
    "postcode": "_postcode_",
    "phone": "_phone_",
    "phone number": "_phone_",
}


class CorpusError(ValueError):
    """Malformed corpus input."""


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace/punctuation tokenization."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class VocabSpec:
    """Token <-> id mapping with reserved UNK/BOS/EOS/EMPTY entries."""

    tokens: list[str]
    max_size: int
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if self.tokens[:len(RESERVED)] != list(RESERVED):
            raise CorpusError("vocab: reserved tokens must lead the token list")
        if len(self.index) != len(self.tokens):
            raise CorpusError("vocab: duplicate tokens")
        if len(self.tokens) > self.max_size:
            raise CorpusError(f"vocab: {len(self.tokens)} tokens exceed cap {self.max_size}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    unk_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    empty_id = property(lambda self: 3)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode_token(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def encode(self, tokens) -> list[int]:
        return [self.encode_token(t) for t in tokens]

    def decode(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path) -> None:
        payload = {"format": "reflm-vocab", "version": 1,
                   "max_size": self.max_size, "tokens": self.tokens}
        Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VocabSpec":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != "reflm-vocab":
            raise CorpusError(f"{path}: not a vocabulary file")
        return cls(tokens=payload["tokens"], max_size=payload["max_size"])


def build_vocab(token_streams, max_size: int, exclude=()) -> VocabSpec:
    """Most frequent tokens up to the cap; frequency ties break lexicographically.

    ``exclude`` keeps the listed surfaces out of the vocabulary no matter how
    frequent they are (they will encode to UNK), which is how held-out
    reference tokens are forced out of a synthetic decoder vocabulary.
    """
    if max_size <= len(RESERVED):
        raise CorpusError(f"vocab cap {max_size} leaves no room beyond reserved tokens")
    counts = Counter()
    for stream in token_streams:
        counts.update(stream)
    banned = set(RESERVED) | set(exclude)
    ranked = sorted((t for t in counts if t not in banned),
                    key=lambda t: (-counts[t], t))
    kept = ranked[:max_size - len(RESERVED)]
    return VocabSpec(tokens=list(RESERVED) + kept, max_size=max_size)


# ---------------------------------------------------------------------------
# splits and folds
# ---------------------------------------------------------------------------

def split_indices(n: int, seed: int, ratios=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    """Disjoint shuffled train/valid/test index lists covering range(n)."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"split ratios must be three values summing to 1, got {ratios}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = int(n * ratios[0])
    n_valid = int(n * ratios[1])
    return {
        "train": sorted(order[:n_train]),
        "valid": sorted(order[n_train:n_train + n_valid]),
        "test": sorted(order[n_train + n_valid:]),
    }


def make_folds(n: int, k: int, seed: int) -> list[int]:
    """Assign each of n examples to exactly one of k cross-validation folds."""
    if k < 2:
        raise CorpusError("cross validation needs at least 2 folds")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    folds = [0] * n
    for position, example in enumerate(order):
        folds[example] = position % k
    return folds


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------

MIN_RECIPE_TOKENS = 10
MAX_RECIPE_TOKENS = 500


@dataclass
class RecipeDocument:
    """Surface-level recipe: tokenized ingredients and instructions plus the
    string-match copy supervision."""

    ingredients: list[list[str]]
    recipe: list[str]
    copy_labels: list[int]
    copy_candidates: list[list[tuple[int, int]]]


def match_copy_candidates(ingredients: list[list[str]], recipe: list[str]):
    """Exact lowercase surface match of each recipe token against every
    ingredient token position; a token is a copy (z=1) iff any position
    matches.  Spurious matches (a bare unit like "cup") are intentionally
    kept: resolving them is the latent switch's job."""
    positions: dict[str, list[tuple[int, int]]] = {}
    for i, tokens in enumerate(ingredients):
        for j, token in enumerate(tokens):
            positions.setdefault(token, []).append((i, j))
    candidates = [list(positions.get(token, [])) for token in recipe]
    labels = [1 if c else 0 for c in candidates]
    return labels, candidates


def load_recipe_file(path) -> list[RecipeDocument]:
    """Parse recipe JSONL; malformed lines are reported and skipped, and
    recipes outside the 10..500 token range are excluded."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                raw_ingredients = obj["ingredients"]
                raw_recipe = obj["recipe"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                log.warning("%s:%d: malformed recipe line skipped (%s)", path, lineno, exc)
                continue
            ingredients = [tokenize(text) for text in raw_ingredients]
            ingredients = [tokens for tokens in ingredients if tokens]
            recipe = tokenize(raw_recipe)
            if not ingredients:
                log.warning("%s:%d: recipe with empty ingredient list dropped", path, lineno)
                continue
            if not MIN_RECIPE_TOKENS <= len(recipe) <= MAX_RECIPE_TOKENS:
                continue
            labels, candidates = match_copy_candidates(ingredients, recipe)
            docs.append(RecipeDocument(ingredients, recipe, labels, candidates))
    return docs


def save_recipe_file(path, docs: list[RecipeDocument]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps({
                "ingredients": [" ".join(t) for t in doc.ingredients],
                "recipe": " ".join(doc.recipe),
            }) + "\n")


def encode_recipe(doc: RecipeDocument, vocab: VocabSpec) -> RecipeExample:
    example = RecipeExample(
        ingredients=[vocab.encode(t) for t in doc.ingredients],
        recipe=vocab.encode(doc.recipe),
        copy_labels=list(doc.copy_labels),
        copy_candidates=[list(c) for c in doc.copy_candidates],
        ingredient_surfaces=[list(t) for t in doc.ingredients],
        recipe_surfaces=list(doc.recipe),
    )
    example.validate()
    return example


# ---------------------------------------------------------------------------
# dialogues and tables
# ---------------------------------------------------------------------------

@dataclass
class RawTable:
    attributes: list[str]       # raw column headers
    rows: list[list[str]]       # raw cell strings


@dataclass
class SubstitutedTable:
    """Table after special-token substitution: every cell is one token."""

    attribute_tokens: list[str]
    cell_tokens: list[list[str]]
    patterns: list[tuple[list[str], str]]  # surface token sequence -> cell token


@dataclass
class RawDialogue:
    turns: list[tuple[str, str]]  # (speaker, text)


def load_table_csv(path) -> RawTable:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if len(rows) < 2:
        raise CorpusError(f"{path}: table needs a header and at least one row")
    header, *body = rows
    width = len(header)
    for r, row in enumerate(body):
        if len(row) != width:
            raise CorpusError(f"{path}: row {r} has {len(row)} cells, expected {width}")
    names = [row[0].strip().lower() for row in body]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise CorpusError(f"{path}: duplicate names in table: {', '.join(duplicates)}")
    return RawTable(attributes=[h.strip() for h in header], rows=body)


def substitute_table(raw: RawTable) -> SubstitutedTable:
    """Collapse every cell to a single token.

    Name/address/postcode/phone columns become per-row special tokens; an
    empty cell becomes the EMPTY token; any other multi-token value collapses
    to its tokens joined with underscores.  The returned patterns map the
    original surface token sequences onto the cell tokens for transcript
    substitution.
    """
    attribute_tokens = ["_".join(tokenize(h)) for h in raw.attributes]
    prefixes = [_SPECIAL_COLUMNS.get(h.strip().lower()) for h in raw.attributes]
    cell_tokens: list[list[str]] = []
    patterns: list[tuple[list[str], str]] = []
    for r, row in enumerate(raw.rows):
        out_row = []
        for c, cell in enumerate(row):
            surface = tokenize(cell)
            if not surface:
                out_row.append(EMPTY)
                continue
            if prefixes[c] is not None:
                token = f"{prefixes[c]}{r}"
            elif len(surface) > 1:
                token = "_".join(surface)
            else:
                token = surface[0]
            out_row.append(token)
            if [token] != surface:
                patterns.append((surface, token))
        cell_tokens.append(out_row)
    # longest surface first, then lexicographic, so "the nirala" cannot be
    # shadowed by a shorter match and ordering stays deterministic
    patterns.sort(key=lambda p: (-len(p[0]), p[0], p[1]))
    return SubstitutedTable(attribute_tokens, cell_tokens, patterns)


def substitute_tokens(tokens: list[str], patterns) -> list[str]:
    """Left-to-right, longest-match-first, non-overlapping replacement."""
    out = []
    i = 0
    n = len(tokens)
    while i < n:
        for surface, replacement in patterns:
            if tokens[i:i + len(surface)] == surface:
                out.append(replacement)
                i += len(surface)
                break
        else:
            out.append(tokens[i])
            i += 1
    return out


def load_dialogue_file(path) -> list[RawDialogue]:
    """Parse dialogue JSONL; non-alternating or empty dialogues are rejected
    with a diagnostic and skipped."""
    dialogues = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                turns = [(t["speaker"], t["text"]) for t in obj["turns"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                log.warning("%s:%d: malformed dialogue line skipped (%s)", path, lineno, exc)
                continue
            ok = bool(turns)
            for t, (speaker, text) in enumerate(turns):
                expected = "M" if t % 2 == 0 else "U"
                if speaker != expected or not tokenize(text):
                    ok = False
                    break
            if not ok:
                log.warning("%s:%d: dialogue rejected (turns must alternate M/U "
                            "starting with M and be non-empty)", path, lineno)
                continue
            dialogues.append(RawDialogue(turns))
    return dialogues


def save_dialogue_file(path, dialogues: list[RawDialogue]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps({
                "turns": [{"speaker": s, "text": t} for s, t in d.turns],
            }) + "\n")


def save_table_csv(path, raw: RawTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(raw.attributes)
        writer.writerows(raw.rows)


def dialogue_token_streams(dialogues: list[RawDialogue], sub: SubstitutedTable):
    """Substituted token streams for vocabulary building (counts are taken
    after substitution, so special table tokens are vocabulary members)."""
    for dialogue in dialogues:
        for _, text in dialogue.turns:
            yield substitute_tokens(tokenize(text), sub.patterns)


def encode_table(sub: SubstitutedTable, vocab: VocabSpec) -> DatabaseTable:
    table = DatabaseTable(
        attributes=vocab.encode(sub.attribute_tokens),
        cells=[vocab.encode(row) for row in sub.cell_tokens],
        attribute_surfaces=list(sub.attribute_tokens),
        cell_surfaces=[list(row) for row in sub.cell_tokens],
    )
    table.validate()
    return table


def encode_dialogue(raw: RawDialogue, sub: SubstitutedTable, table: DatabaseTable,
                    vocab: VocabSpec) -> DialogueExample:
    """Substitute, encode, and attach string-match copy supervision.

    A machine token is labeled a copy (z=1) iff its surface equals some cell
    token; all matching cells become its candidates.
    """
    cell_positions: dict[str, list[tuple[int, int]]] = {}
    for r, row in enumerate(sub.cell_tokens):
        for c, token in enumerate(row):
            cell_positions.setdefault(token, []).append((r, c))

    turns = []
    surfaces = []
    machine_labels = []
    machine_candidates = []
    for t, (speaker, text) in enumerate(raw.turns):
        tokens = substitute_tokens(tokenize(text), sub.patterns)
        surfaces.append(tokens)
        turns.append((speaker, vocab.encode(tokens)))
        if speaker == "M":
            cands = [list(cell_positions.get(tok, [])) for tok in tokens]
            machine_candidates.append(cands)
            machine_labels.append([1 if c else 0 for c in cands])
    example = DialogueExample(turns=turns, machine_labels=machine_labels,
                              machine_candidates=machine_candidates,
                              turn_surfaces=surfaces)
    example.validate(table)
    return example


def load_dialogues(dialogue_path, table_path, max_vocab: int = 900,
                   ) -> tuple[list[DialogueExample], DatabaseTable, VocabSpec]:
    """One-shot loader: substitution, vocabulary over all transcripts, encoding."""
    raw_table = load_table_csv(table_path)
    sub = substitute_table(raw_table)
    dialogues = load_dialogue_file(dialogue_path)
    vocab = build_vocab(dialogue_token_streams(dialogues, sub), max_vocab)
    table = encode_table(sub, vocab)
    examples = [encode_dialogue(d, sub, table, vocab) for d in dialogues]
    return examples, table, vocab


# ---------------------------------------------------------------------------
# coreference documents
# ---------------------------------------------------------------------------

@dataclass
class CorefDocument:
    """Surface-level document after mention preprocessing."""

    tokens: list[str]
    mentions: list[int | None]


def preprocess_coref(tokens: list[str], mention_spans) -> CorefDocument:
    """Apply the mention-filtering rules.

    Entities with a single mention lose their annotations (tokens stay as
    plain words); every surviving mention collapses to the entity's most
    frequent mention token (ties go to the lexicographically smallest); ids
    are renumbered densely in first-mention order.
    """
    spans = sorted(((int(m["start"]), int(m["end"]), int(m["entity"]))
                    for m in mention_spans), key=lambda s: (s[0], s[1]))
    previous_end = 0
    for start, end, _ in spans:
        if not (0 <= start < end <= len(tokens)):
            raise CorpusError(f"mention span ({start}, {end}) outside document")
        if start < previous_end:
            raise CorpusError(f"overlapping mention spans at token {start}")
        previous_end = end

    mention_count = Counter(entity for _, _, entity in spans)
    token_counts: dict[int, Counter] = {}
    for start, end, entity in spans:
        if mention_count[entity] >= 2:
            token_counts.setdefault(entity, Counter()).update(tokens[start:end])
    chosen = {entity: sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
              for entity, counts in token_counts.items()}

    out_tokens: list[str] = []
    out_mentions: list[int | None] = []
    position = 0
    for start, end, entity in spans:
        while position < start:
            out_tokens.append(tokens[position])
            out_mentions.append(None)
            position += 1
        if entity in chosen:
            out_tokens.append(chosen[entity])
            out_mentions.append(entity)
        else:  # singleton entity: annotation dropped, tokens kept
            out_tokens.extend(tokens[start:end])
            out_mentions.extend([None] * (end - start))
        position = end
    while position < len(tokens):
        out_tokens.append(tokens[position])
        out_mentions.append(None)
        position += 1

    renumber: dict[int, int] = {}
    dense: list[int | None] = []
    for entity in out_mentions:
        if entity is None:
            dense.append(None)
        else:
            if entity not in renumber:
                renumber[entity] = len(renumber) + 1
            dense.append(renumber[entity])
    return CorefDocument(tokens=out_tokens, mentions=dense)


def load_coref_file(path) -> list[CorefDocument]:
    """Parse coref JSONL; documents with overlapping mentions are rejected
    with a diagnostic and skipped."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                tokens = [str(t).lower() for t in obj["tokens"]]
                mentions = obj.get("mentions", [])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                log.warning("%s:%d: malformed document line skipped (%s)", path, lineno, exc)
                continue
            try:
                docs.append(preprocess_coref(tokens, mentions))
            except CorpusError as exc:
                log.warning("%s:%d: document rejected (%s)", path, lineno, exc)
    return docs


def save_coref_file(path, raw_docs) -> None:
    """Write documents in the external format: tokens plus span mentions."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in raw_docs:
            fh.write(json.dumps(doc) + "\n")


def encode_coref(doc: CorefDocument, vocab: VocabSpec) -> AnnotatedDocument:
    encoded = AnnotatedDocument(tokens=vocab.encode(doc.tokens),
                                mentions=list(doc.mentions),
                                surfaces=list(doc.tokens))
    encoded.validate()
    return encoded


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

_QUANTITIES = ["1", "2", "3", "4", "half"]
_UNITS = ["cup", "cups", "spoons", "pound", "slices"]
_MODIFIERS = ["fresh", "large", "small", "chopped", "diced"]
_VERBS = ["combine", "blend", "mix", "stir"]

_FOODS = ["indian", "chinese", "italian", "french", "thai",
          "mexican", "korean", "turkish", "spanish", "greek"]
_AREAS = ["north", "south", "east", "west", "centre"]
_PRICES = ["cheap", "moderate", "expensive"]
_NAME_LEFT = ["golden", "royal", "silver", "happy", "lucky",
              "grand", "cosy", "urban", "rustic", "sunny"]
_NAME_RIGHT = ["palace", "garden", "corner", "kitchen", "table",
               "bistro", "house", "cellar", "terrace", "spoon"]

_PEOPLE = ["anna", "boris", "clara", "dmitri", "elena", "felix", "greta",
           "henrik", "irene", "jonas", "karin", "lars", "marta", "nils",
           "olga", "pavel", "rosa", "stefan", "tanya", "viktor",
           "wanda", "xenia", "yuri", "zofia", "albert", "bianca", "carlos",
           "dora", "edgar", "frida", "gustav", "hilda", "ivan", "judith",
           "kurt", "laura", "milan", "nadia", "oscar", "petra"]
_COREF_FILLER = ["the", "a", "man", "woman", "market", "story", "meeting",
                 "later", "yesterday", "quietly", "again", "smiled", "spoke",
                 "answered", "listened", "arrived", "left", "agreed"]


def _synthetic_recipes(rng: random.Random, n_examples: int, n_common: int,
                       n_heldout: int):
    """Recipes whose instructions refer to each ingredient as "the MOD HEAD",
    with MOD unique within the recipe, so a pointer can locate the head from
    context alone.  Held-out head tokens appear only in test examples: they
    are out of any vocabulary built on the training split and reachable only
    through copying."""
    common = [f"ing{k}" for k in range(n_common)]
    heldout = [f"rare{k}" for k in range(n_heldout)]
    heldout_cycle = list(heldout)
    rng.shuffle(heldout_cycle)

    n_test = max(1, n_examples // 10)
    n_valid = max(1, n_examples // 10)
    n_train = n_examples - n_test - n_valid

    def next_heldout() -> str:
        if not heldout_cycle:
            heldout_cycle.extend(heldout)
        return heldout_cycle.pop()

    docs = []
    for index in range(n_examples):
        in_test = index >= n_train + n_valid
        k = rng.randint(2, 3)
        mods = rng.sample(_MODIFIERS, k)
        heads: list[str] = []
        while len(heads) < k:
            if in_test and (rng.random() < 0.6 or not heads):
                head = next_heldout()
            else:
                head = rng.choice(common)
            if head not in heads:
                heads.append(head)
        ingredients = [
            " ".join([rng.choice(_QUANTITIES), rng.choice(_UNITS), mod, head])
            for mod, head in zip(mods, heads)
        ]
        recipe = ["first", rng.choice(_VERBS), "the", mods[0], heads[0],
                  "and", "the", mods[1], heads[1], "in", "a", "bowl", "."]
        for mod, head in zip(mods[2:], heads[2:]):
            recipe += ["then", "add", "the", mod, head, "."]
        if rng.random() < 0.2:
            recipe += ["pour", "into", "a", "cup", "."]  # spurious unit match
        recipe += ["cook", "for", rng.choice(["5", "10", "20"]), "minutes",
                   "and", "serve", "."]
        docs.append({"ingredients": ingredients, "recipe": " ".join(recipe)})
    splits = {
        "train": list(range(n_train)),
        "valid": list(range(n_train, n_train + n_valid)),
        "test": list(range(n_train + n_valid, n_examples)),
    }
    return docs, {"held_out_tokens": heldout, "splits": splits}


def _synthetic_dialogues(rng: random.Random, n_rows: int, n_dialogues: int):
    """Restaurant dialogues over a synthetic table.

    Every row is referenced during training, but for 20% of the table's
    cells (a row's phone and/or address) no training dialogue ever asks the
    question that would surface them, so those cell tokens stay out of the
    training transcripts and are reachable only through the table pointer.
    Test dialogues ask exactly those withheld questions.
    """
    if n_rows > len(_FOODS):
        raise CorpusError(f"synthetic dialogue supports at most {len(_FOODS)} rows")
    attributes = ["name", "food", "area", "price range", "address", "phone"]
    rows = []
    for j in range(n_rows):
        rows.append([
            f"{_NAME_LEFT[j]} {_NAME_RIGHT[j]}",
            _FOODS[j],
            _AREAS[j % len(_AREAS)],
            _PRICES[j % len(_PRICES)],
            f"{j + 1} {_NAME_RIGHT[(j + 3) % len(_NAME_RIGHT)]} road",
            f"01223 {300000 + 111 * j}",
        ])
    # hold one or both of (address, phone) out of the training questions for
    # some rows: 20% of all cell tokens never appear in training transcripts
    pattern = ["both", "both", "both", "phone", "phone", "phone",
               "address", "address", "address", "none"]
    held_out = {j: pattern[j % len(pattern)] for j in range(n_rows)}
    held_cells = []
    for j in range(n_rows):
        if held_out[j] in ("both", "address"):
            held_cells.append([j, "address"])
        if held_out[j] in ("both", "phone"):
            held_cells.append([j, "phone"])

    def build(row: int, ask_attr: str | None) -> dict:
        name, food, area, price, address, phone = rows[row]
        ask = rng.choice([
            f"i want {food} food in the {area}",
            f"looking for a {price} restaurant in the {area}",
        ])
        turns = [
            {"speaker": "M", "text": "hello , how may i help you ?"},
            {"speaker": "U", "text": ask},
            {"speaker": "M",
             "text": f"{name} is a {price} restaurant in the {area} serving {food} food"},
        ]
        if ask_attr == "phone":
            turns += [
                {"speaker": "U", "text": rng.choice(["what is the phone number",
                                                     "may i have the phone number"])},
                {"speaker": "M", "text": f"the phone number of {name} is {phone}"},
            ]
        elif ask_attr == "address":
            turns += [
                {"speaker": "U", "text": rng.choice(["what is the address",
                                                     "may i have the address"])},
                {"speaker": "M", "text": f"sure , {name} is on {address}"},
            ]
        turns.append({"speaker": "U", "text": "thank you good bye"})
        return {"turns": turns}

    n_test = max(1, n_dialogues // 10)
    n_valid = max(1, n_dialogues // 10)
    n_train = n_dialogues - n_test - n_valid
    dialogues = []
    referenced = []
    for i in range(n_train + n_valid):
        row = i % n_rows
        allowed = {"both": [None], "phone": ["address"], "address": ["phone"],
                   "none": ["phone", "address"]}[held_out[row]]
        dialogues.append(build(row, rng.choice(allowed)))
        referenced.append(row)
    test_queries = [(j, attr) for j, attr in held_cells]
    for i in range(n_test):
        row, attr = test_queries[i % len(test_queries)]
        dialogues.append(build(row, attr))
        referenced.append(row)
    splits = {
        "train": list(range(n_train)),
        "valid": list(range(n_train, n_train + n_valid)),
        "test": list(range(n_train + n_valid, n_dialogues)),
    }
    info = {"held_out_cells": held_cells, "referenced_rows": referenced,
            "splits": splits}
    return {"attributes": attributes, "rows": rows, "dialogues": dialogues}, info


def _synthetic_coref(rng: random.Random, n_docs: int):
    """Documents where a few named entities recur many times with stretches
    of filler between mentions, so that remembering who is in the document
    pays off and plain n-gram-ish cues do not."""
    docs = []
    for _ in range(n_docs):
        n_entities = rng.randint(2, 3)
        people = rng.sample(_PEOPLE, n_entities + 1)
        entity_ids = rng.sample(range(10, 100), n_entities + 1)
        tokens: list[str] = []
        mentions: list[dict] = []

        def mention(person_index: int):
            name = people[person_index]
            start = len(tokens)
            if rng.random() < 0.2:
                tokens.extend(["mr", name])  # multi-token mention to collapse
            else:
                tokens.append(name)
            mentions.append({"start": start, "end": len(tokens),
                             "entity": entity_ids[person_index]})

        def filler_sentence():
            tokens.extend(["the", rng.choice(_COREF_FILLER[4:8])])
            tokens.extend(rng.choice(_COREF_FILLER[11:]) for _ in range(rng.randint(2, 5)))
            tokens.append(".")

        mention(0)
        tokens.append("met")
        mention(1)
        tokens.extend(["in", "the", rng.choice(["market", "meeting", "story"]), "."])
        for _ in range(rng.randint(4, 7)):
            filler_sentence()
            if rng.random() < 0.8:
                tokens.append("then")
                mention(rng.randrange(n_entities))
                tokens.append(rng.choice(["spoke", "smiled", "answered", "agreed"]))
                if rng.random() < 0.4:
                    tokens.append("to")
                    mention(rng.randrange(n_entities))
                tokens.append(".")
        if rng.random() < 0.3:
            tokens.append("then")
            mention(n_entities)  # singleton entity, dropped in preprocessing
            tokens.extend(["left", "early", "."])
        docs.append({"tokens": tokens, "mentions": mentions})
    return docs, {"people": _PEOPLE}


def make_synthetic(task: str, seed: int, out_dir, **sizes) -> dict:
    """Write a deterministic desk-scale corpus for the given task.

    Returns the synthetic info dict (also saved next to the files), which
    includes explicit split assignments when the task needs structured
    held-out data.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    if task == "recipes":
        docs, info = _synthetic_recipes(rng, sizes.get("n_examples", 500),
                                        sizes.get("n_common", 30),
                                        sizes.get("n_heldout", 120))
        with open(out_dir / "recipes.jsonl", "w", encoding="utf-8") as fh:
            for doc in docs:
                fh.write(json.dumps(doc) + "\n")
    elif task == "dialogue":
        data, info = _synthetic_dialogues(rng, sizes.get("n_rows", 10),
                                          sizes.get("n_examples", 300))
        save_table_csv(out_dir / "table.csv",
                       RawTable(data["attributes"], data["rows"]))
        with open(out_dir / "dialogues.jsonl", "w", encoding="utf-8") as fh:
            for d in data["dialogues"]:
                fh.write(json.dumps(d) + "\n")
    elif task == "coref":
        docs, info = _synthetic_coref(rng, sizes.get("n_examples", 300))
        save_coref_file(out_dir / "coref.jsonl", docs)
    else:
        raise CorpusError(f"unknown task {task!r}")
    info = {"task": task, "seed": seed, **info}
    (out_dir / "synthetic_info.json").write_text(json.dumps(info) + "\n",
                                                 encoding="utf-8")
    return info


# ---------------------------------------------------------------------------
# prepared corpus directories
# ---------------------------------------------------------------------------

DEFAULT_VOCAB_SIZES = {"recipes": 10000, "dialogue": 900, "coref": 50000}


@dataclass
class PreparedCorpus:
    """Everything the harness needs for one task: encoded examples per split,
    surface documents (for token classes and OOV accounting), the vocabulary,
    and the table for the dialogue task."""

    task: str
    vocab: VocabSpec
    manifest: dict
    examples: dict[str, list]
    surface_docs: dict[str, list]
    table: DatabaseTable | None = None


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def prepare_corpus(task: str, out_dir, seed: int, *, recipes_file=None,
                   dialogues_file=None, table_file=None, coref_file=None,
                   synthetic: bool = False, max_vocab: int | None = None,
                   folds: int | None = None, ratios=(0.8, 0.1, 0.1),
                   **synthetic_sizes) -> dict:
    """Build a prepared corpus directory: split files in the external formats,
    a vocabulary computed on the training split, and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    max_vocab = max_vocab or DEFAULT_VOCAB_SIZES[task]
    info = None
    if synthetic:
        info = make_synthetic(task, seed, out_dir, **synthetic_sizes)
        recipes_file = out_dir / "recipes.jsonl"
        dialogues_file = out_dir / "dialogues.jsonl"
        table_file = out_dir / "table.csv"
        coref_file = out_dir / "coref.jsonl"

    manifest = {"format": "reflm-corpus", "version": 1, "task": task,
                "seed": seed, "max_vocab": max_vocab}
    vocab_exclude = tuple(info.get("held_out_tokens", ())) if info else ()

    if task == "recipes":
        docs = load_recipe_file(recipes_file)
        splits = (info or {}).get("splits") or split_indices(len(docs), seed, ratios)
        for split in SPLITS:
            save_recipe_file(out_dir / f"{split}.jsonl",
                             [docs[i] for i in splits[split]])
        train_docs = [docs[i] for i in splits["train"]]
        streams = ([d.recipe for d in train_docs]
                   + [t for d in train_docs for t in d.ingredients])
        vocab = build_vocab(streams, max_vocab, exclude=vocab_exclude)
    elif task == "dialogue":
        raw_table = load_table_csv(table_file)
        sub = substitute_table(raw_table)
        dialogues = load_dialogue_file(dialogues_file)
        save_table_csv(out_dir / "table.csv", raw_table)
        if folds:
            fold_ids = make_folds(len(dialogues), folds, seed)
            save_dialogue_file(out_dir / "dialogues.jsonl", dialogues)
            manifest["folds"] = fold_ids
            train = [d for d, f in zip(dialogues, fold_ids) if f != 0]
            vocab = build_vocab(dialogue_token_streams(train, sub), max_vocab,
                                exclude=vocab_exclude)
        else:
            splits = (info or {}).get("splits") or split_indices(len(dialogues),
                                                                 seed, ratios)
            for split in SPLITS:
                save_dialogue_file(out_dir / f"{split}.jsonl",
                                   [dialogues[i] for i in splits[split]])
            train = [dialogues[i] for i in splits["train"]]
            vocab = build_vocab(dialogue_token_streams(train, sub), max_vocab,
                                exclude=vocab_exclude)
    elif task == "coref":
        docs = load_coref_file(coref_file)
        splits = (info or {}).get("splits") or split_indices(len(docs), seed, ratios)
        raw = [{"tokens": d.tokens,
                "mentions": [{"start": i, "end": i + 1, "entity": e}
                             for i, e in enumerate(d.mentions) if e is not None]}
               for d in docs]
        for split in SPLITS:
            save_coref_file(out_dir / f"{split}.jsonl", [raw[i] for i in splits[split]])
        train_docs = [docs[i] for i in splits["train"]]
        vocab = build_vocab((d.tokens for d in train_docs), max_vocab,
                            exclude=vocab_exclude)
    else:
        raise CorpusError(f"unknown task {task!r}")

    vocab.save(out_dir / VOCAB_NAME)
    manifest["vocab_size"] = vocab.size
    if info:
        manifest["synthetic"] = {k: v for k, v in info.items() if k != "splits"}
    if not folds:
        manifest["split_sizes"] = {s: _count_lines(out_dir / f"{s}.jsonl")
                                   for s in SPLITS}
    _write_manifest(out_dir, manifest)
    return manifest


def _count_lines(path: Path) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def load_prepared(prepared_dir, split: str, fold: int | None = None) -> PreparedCorpus:
    """Load one split of a prepared corpus directory into model objects."""
    prepared_dir = Path(prepared_dir)
    manifest = json.loads((prepared_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    if manifest.get("format") != "reflm-corpus":
        raise CorpusError(f"{prepared_dir}: not a prepared corpus directory")
    task = manifest["task"]
    vocab = VocabSpec.load(prepared_dir / VOCAB_NAME)

    def pick_fold(items):
        fold_ids = manifest["folds"]
        if fold is None or not 0 <= fold < max(fold_ids) + 1:
            raise CorpusError("this corpus uses cross-validation folds; pass a valid fold")
        if split == "valid":
            return [x for x, f in zip(items, fold_ids) if f == fold]
        if split == "train":
            return [x for x, f in zip(items, fold_ids) if f != fold]
        raise CorpusError("fold corpora have train/valid splits only")

    if task == "recipes":
        docs = load_recipe_file(prepared_dir / f"{split}.jsonl")
        examples = [encode_recipe(d, vocab) for d in docs]
        return PreparedCorpus(task, vocab, manifest, {split: examples},
                              {split: docs})
    if task == "dialogue":
        raw_table = load_table_csv(prepared_dir / "table.csv")
        sub = substitute_table(raw_table)
        table = encode_table(sub, vocab)
        if "folds" in manifest:
            dialogues = pick_fold(load_dialogue_file(prepared_dir / "dialogues.jsonl"))
        else:
            dialogues = load_dialogue_file(prepared_dir / f"{split}.jsonl")
        examples = [encode_dialogue(d, sub, table, vocab) for d in dialogues]
        return PreparedCorpus(task, vocab, manifest, {split: examples},
                              {split: dialogues}, table=table)
    if task == "coref":
        docs = load_coref_file(prepared_dir / f"{split}.jsonl")
        examples = [encode_coref(d, vocab) for d in docs]
        return PreparedCorpus(task, vocab, manifest, {split: examples},
                              {split: docs})
    raise CorpusError(f"unknown task {task!r} in manifest")
