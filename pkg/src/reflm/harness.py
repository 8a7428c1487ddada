"""Training loop (SGD with gradient clipping), per-token-class perplexity
evaluation, beam-search generation with BLEU, and attention heat-map export.

Evaluation conventions
----------------------
Each utterance or recipe is scored through its end-of-sequence token; a
token's probability is its full decision-chain probability (the marginal in
latent mode, the labeled joint in supervised modes).  When a target surface
is outside the training vocabulary, the vocabulary branch scores UNK with its
mass split evenly over the distinct unseen surfaces of the evaluation split,
so closed-vocabulary baselines remain finite and comparable on tokens that
only a pointer can produce.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, numcore as nc, plotting
from .coref_model import CorefModel
from .corpus import PreparedCorpus, VocabSpec
from .numcore import Tensor
from .recipe_model import RecipeModel, token_probability
from .table_model import TableModel

log = logging.getLogger(__name__)

TASKS = ("recipes", "dialogue", "coref")
REFERENCE_LABELS = {"recipes": "ingredient", "dialogue": "table", "coref": "entity"}


class TrainingError(RuntimeError):
    pass


def build_id() -> str:
    """Git describe of the working tree, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
            timeout=5, check=False)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"reflm-{__version__}"


@dataclass
class TrainConfig:
    task: str
    mode: str = "latent"
    hidden_dim: int = 64
    embed_dim: int = 32
    attention_dim: int = 32
    learning_rate: float = 0.5
    clip_norm: float = 5.0
    epochs: int = 5
    batch_size: int = 1
    seed: int = 0
    sentence_attention: bool = False
    init_checkpoint: str | None = None

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("hidden_dim", "embed_dim", "attention_dim", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if self.task == "coref" and self.mode == "latent":
            raise ValueError("coref has no latent mode; use supervised or vocab")
        if self.mode not in ("supervised", "latent", "vocab"):
            raise ValueError(f"unknown mode {self.mode!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def build_model(config: TrainConfig, vocab: VocabSpec):
    rng = np.random.default_rng(config.seed)
    if config.task == "recipes":
        return RecipeModel(vocab.size, vocab.bos_id, vocab.eos_id,
                           config.embed_dim, config.hidden_dim,
                           config.attention_dim, rng)
    if config.task == "dialogue":
        return TableModel(vocab.size, vocab.bos_id, vocab.eos_id,
                          config.embed_dim, config.hidden_dim,
                          config.attention_dim, rng)
    if config.task == "coref":
        return CorefModel(vocab.size, config.embed_dim, config.hidden_dim,
                          config.attention_dim, rng)
    raise ValueError(f"unknown task {config.task!r}")


def example_nll(model, config: TrainConfig, example, table=None) -> Tensor:
    if config.task == "recipes":
        return model.sequence_nll(example, config.mode)
    if config.task == "dialogue":
        return model.dialogue_nll(example, table, config.mode,
                                  config.sentence_attention)
    return model.document_nll(example, config.mode)


def example_token_count(config: TrainConfig, example) -> int:
    if config.task == "recipes":
        return len(example.recipe) + 1
    if config.task == "dialogue":
        return sum(len(tokens) + 1 for _, tokens in example.machine_turns())
    return len(example.tokens)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    config: TrainConfig
    loss_log: list[dict]
    best_epoch: int
    best_valid_nll: float | None


def _clip_factor(params, clip_norm: float) -> float:
    norm = nc.global_norm(params)
    if norm > clip_norm:
        return clip_norm / norm
    return 1.0


def mean_corpus_nll(model, config: TrainConfig, examples, table=None) -> float:
    """Per-token NLL over a frozen corpus (no gradients recorded)."""
    total = 0.0
    tokens = 0
    for example in examples:
        total += example_nll(model, config, example, table).item()
        tokens += example_token_count(config, example)
    return total / max(tokens, 1)


def train(config: TrainConfig, vocab: VocabSpec, train_examples,
          valid_examples=(), table=None) -> TrainResult:
    """Plain SGD, one example per step, global-norm gradient clipping.

    The learning rate halves whenever validation NLL fails to improve, and
    the best-validation parameters are restored at the end.  Fully
    deterministic given (config, corpus).
    """
    config.validate()
    if not train_examples:
        raise TrainingError("no training examples")
    model = build_model(config, vocab)
    params = model.named_params()
    if config.init_checkpoint:
        values, meta = nc.load_checkpoint(config.init_checkpoint)
        missing = nc.assign_parameters(params, values, strict=False)
        log.info("warm start from %s: %d parameters fresh",
                 config.init_checkpoint, len(missing))
    param_list = list(params.values())

    order_rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    best_valid = math.inf
    best_epoch = -1
    best_snapshot = None
    loss_log: list[dict] = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train_examples))
        epoch_nll = 0.0
        epoch_tokens = 0
        for position, index in enumerate(order):
            example = train_examples[int(index)]
            n_tokens = example_token_count(config, example)
            nc.zero_grad(param_list)
            with nc.record() as tape:
                nll = example_nll(model, config, example, table)
                loss = nc.scale(nll, 1.0 / n_tokens)
                nc.backward(loss, tape)
            value = nll.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, example {int(index)}")
            factor = _clip_factor(param_list, config.clip_norm)
            step_size = lr * factor
            for p in param_list:
                if p.grad is not None:
                    p.data = p.data - step_size * p.grad
            epoch_nll += value
            epoch_tokens += n_tokens
        entry = {"epoch": epoch, "train_nll": epoch_nll / max(epoch_tokens, 1),
                 "valid_nll": None, "learning_rate": lr}
        if valid_examples:
            valid_nll = mean_corpus_nll(model, config, valid_examples, table)
            entry["valid_nll"] = valid_nll
            if valid_nll < best_valid:
                best_valid = valid_nll
                best_epoch = epoch
                best_snapshot = {name: t.data.copy() for name, t in params.items()}
            else:
                lr *= 0.5  # halve on validation stall
        loss_log.append(entry)
    if best_snapshot is not None:
        for name, tensor in params.items():
            tensor.data = best_snapshot[name]
    nc.zero_grad(param_list)
    return TrainResult(model=model, config=config, loss_log=loss_log,
                       best_epoch=best_epoch,
                       best_valid_nll=None if best_valid is math.inf else best_valid)


def save_model(path, model, config: TrainConfig, vocab: VocabSpec,
               extra: dict | None = None) -> None:
    """Checkpoint parameters with the config echo in the metadata header.

    A coref model trained in vocab mode stores only its plain-LM parameters,
    so warm starts leave the reference machinery freshly initialized.
    """
    params = model.named_params()
    scope = "full"
    if config.task == "coref" and config.mode == "vocab":
        keep = set(model.lm_param_names())
        params = {name: t for name, t in params.items() if name in keep}
        scope = "lm"
    metadata = {"config": config.to_dict(), "vocab_size": vocab.size,
                "param_scope": scope, "build": build_id()}
    if extra:
        metadata.update(extra)
    nc.save_checkpoint(path, params, metadata)


def load_model(path, vocab: VocabSpec):
    """Rebuild the model a checkpoint was saved from and load its weights."""
    values, metadata = nc.load_checkpoint(path)
    config = TrainConfig.from_dict(metadata["config"]).validate()
    if metadata.get("vocab_size") != vocab.size:
        raise ValueError(
            f"checkpoint was built with vocab size {metadata.get('vocab_size')}, "
            f"got {vocab.size}; pass the vocabulary it was prepared with")
    model = build_model(config, vocab)
    strict = metadata.get("param_scope", "full") == "full"
    nc.assign_parameters(model.named_params(), values, strict=strict)
    return model, config, metadata


def write_loss_log(loss_log, csv_path, png_path=None) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_nll", "valid_nll", "learning_rate"])
        for entry in loss_log:
            writer.writerow([entry["epoch"], repr(entry["train_nll"]),
                             "" if entry["valid_nll"] is None else repr(entry["valid_nll"]),
                             repr(entry["learning_rate"])])
    if png_path is not None:
        plotting.render_loss_curve(loss_log, png_path)


# ---------------------------------------------------------------------------
# per-token-class perplexity
# ---------------------------------------------------------------------------

@dataclass
class ClassStats:
    count: int = 0
    log_prob_sum: float = 0.0

    def add(self, log_prob: float) -> None:
        self.count += 1
        self.log_prob_sum += log_prob

    @property
    def perplexity(self) -> float | None:
        if self.count == 0:
            return None
        return math.exp(-self.log_prob_sum / self.count)


@dataclass
class PerplexityReport:
    task: str
    mode: str
    split: str
    reference_label: str
    oov_spread: int
    classes: dict[str, ClassStats]
    config: dict = field(default_factory=dict)
    build: str = field(default_factory=build_id)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "mode": self.mode, "split": self.split,
            "reference_label": self.reference_label,
            "oov_spread": self.oov_spread,
            "build": self.build, "config": self.config,
            "classes": {
                name: {"count": stats.count, "perplexity": stats.perplexity}
                for name, stats in self.classes.items()
            },
            "notes": "each sequence is scored through EOS; reference_oov is a "
                     "subset of reference; absent classes report null perplexity",
        }


def _surface_rows(config: TrainConfig, example) -> list[list[str | None]]:
    """Target surfaces aligned with the model's scoring order; None marks EOS."""
    if config.task == "recipes":
        return [list(example.recipe_surfaces) + [None]]
    if config.task == "dialogue":
        machine = [s for (speaker, _), s in zip(example.turns, example.turn_surfaces)
                   if speaker == "M"]
        return [list(tokens) + [None] for tokens in machine]
    return [list(example.surfaces)]


def _example_scores(model, config: TrainConfig, example, table=None):
    if config.task == "recipes":
        return model.score_tokens(example)
    if config.task == "dialogue":
        return model.score_tokens(example, table, config.sentence_attention)
    return model.score_tokens(example, config.mode)


def perplexity_report(model, config: TrainConfig, prepared: PreparedCorpus,
                      split: str, mode: str | None = None) -> PerplexityReport:
    """Per-class perplexity from full decision-chain token probabilities.

    Classes: every token ("all"), tokens a reference could produce
    ("reference": non-empty copy candidates, table-cell matches, or entity
    mentions), the rest ("word"), and reference tokens whose surface is
    outside the training vocabulary ("reference_oov").
    """
    mode = mode or config.mode
    examples = prepared.examples[split]
    vocab = prepared.vocab

    surfaces_per_example = [_surface_rows(config, ex) for ex in examples]
    oov_surfaces = {s for rows in surfaces_per_example for row in rows
                    for s in row if s is not None and s not in vocab}
    oov_spread = max(1, len(oov_surfaces))

    classes = {name: ClassStats() for name in
               ("all", "reference", "word", "reference_oov")}
    for example, surface_rows in zip(examples, surfaces_per_example):
        scores = _example_scores(model, config, example, prepared.table)
        flat_surfaces = [s for row in surface_rows for s in row]
        if len(scores) != len(flat_surfaces):
            raise RuntimeError("internal: score/surface misalignment")
        for score, surface in zip(scores, flat_surfaces):
            is_oov = surface is not None and surface not in vocab
            spread = oov_spread if is_oov else 1
            if config.task == "coref":
                prob = (score.word_prob / spread) * score.decision_prob
                is_reference = score.is_mention
            else:
                prob = token_probability(score, mode, spread)
                is_reference = score.has_candidates
            log_prob = math.log(max(prob, 1e-300))
            classes["all"].add(log_prob)
            classes["reference" if is_reference else "word"].add(log_prob)
            if is_reference and is_oov:
                classes["reference_oov"].add(log_prob)
    return PerplexityReport(
        task=config.task, mode=mode, split=split,
        reference_label=REFERENCE_LABELS[config.task],
        oov_spread=oov_spread, classes=classes, config=config.to_dict())


def write_report(report: PerplexityReport, json_path, csv_path=None) -> None:
    payload = report.to_dict()
    Path(json_path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                               encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "count", "perplexity"])
            for name, stats in report.classes.items():
                ppl = stats.perplexity
                writer.writerow([name, stats.count,
                                 "" if ppl is None else repr(ppl)])


# ---------------------------------------------------------------------------
# beam search and BLEU
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    tokens: tuple[str, ...]
    log_prob: float
    finished: bool


def step_surface_distribution(model: RecipeModel, vocab: VocabSpec, step,
                              encoding, ingredient_surfaces) -> dict[str, float]:
    """Next-token distribution over surfaces with copy mass folded in.

    Every vocabulary id contributes through the switch-off branch; every
    ingredient position adds switch-on mass to its own surface form, so
    out-of-vocabulary ingredient tokens become reachable outputs.
    """
    pi = float(step.switch_prob.data)
    vocab_probs = step.vocab_probs.data
    dist = {vocab.decode(i): float(p) * (1.0 - pi)
            for i, p in enumerate(vocab_probs)}
    copy = step.copy_probs.data
    for flat, (i, j) in enumerate(encoding.positions):
        surface = ingredient_surfaces[i][j]
        dist[surface] = dist.get(surface, 0.0) + pi * float(copy[flat])
    return dist


def beam_decode(model: RecipeModel, vocab: VocabSpec, ingredients,
                ingredient_surfaces, beam_width: int = 10,
                max_len: int = 50) -> list[Hypothesis]:
    """Length-bounded beam search over the mixture next-token distribution.

    Sequences end at EOS (kept in the output tokens) or at ``max_len``;
    results are sorted by total log probability with a deterministic
    tie-break on the token sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    eos_surface = vocab.decode(vocab.eos_id)
    encoding = model.encode_ingredients(ingredients)
    start = (model.bos_id, encoding.init_state, model.initial_context())
    beams = [(Hypothesis((), 0.0, False), start)]
    for _ in range(max_len):
        pool = []
        for hyp, carry in beams:
            if hyp.finished:
                pool.append((hyp, carry))
                continue
            prev_token, state, context = carry
            step = model.decode_step(prev_token, state, context,
                                     encoding.token_states)
            dist = step_surface_distribution(model, vocab, step, encoding,
                                             ingredient_surfaces)
            for surface in sorted(dist):
                prob = dist[surface]
                if prob <= 0.0:
                    continue
                tokens = hyp.tokens + (surface,)
                finished = surface == eos_surface or len(tokens) >= max_len
                new_carry = (vocab.encode_token(surface), step.state, step.context)
                pool.append((Hypothesis(tokens, hyp.log_prob + math.log(prob),
                                        finished), new_carry))
        pool.sort(key=lambda pair: (-pair[0].log_prob, pair[0].tokens))
        beams = pool[:beam_width]
        if all(hyp.finished for hyp, _ in beams):
            break
    return [hyp for hyp, _ in beams]


def greedy_decode(model: RecipeModel, vocab: VocabSpec, ingredients,
                  ingredient_surfaces, max_len: int = 50) -> Hypothesis:
    """Step-wise argmax decoding (independent of the beam machinery)."""
    eos_surface = vocab.decode(vocab.eos_id)
    encoding = model.encode_ingredients(ingredients)
    prev, state, context = model.bos_id, encoding.init_state, model.initial_context()
    tokens: list[str] = []
    log_prob = 0.0
    finished = False
    while len(tokens) < max_len and not finished:
        step = model.decode_step(prev, state, context, encoding.token_states)
        dist = step_surface_distribution(model, vocab, step, encoding,
                                         ingredient_surfaces)
        surface = min(dist, key=lambda s: (-dist[s], s))
        tokens.append(surface)
        log_prob += math.log(dist[surface])
        finished = surface == eos_surface
        prev, state, context = vocab.encode_token(surface), step.state, step.context
    return Hypothesis(tuple(tokens), log_prob, finished or len(tokens) >= max_len)


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references) -> float:
    """Corpus-level BLEU-4 with standard clipping and brevity penalty."""
    candidates = [list(c) for c in candidates]
    references = [list(r) for r in references]
    if not candidates or len(candidates) != len(references):
        raise ValueError("bleu: candidate and reference corpora must align")
    clipped = [0] * 4
    totals = [0] * 4
    candidate_length = 0
    reference_length = 0
    for cand, ref in zip(candidates, references):
        candidate_length += len(cand)
        reference_length += len(ref)
        for n in range(1, 5):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            clipped[n - 1] += sum(min(count, ref_counts[gram])
                                  for gram, count in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if candidate_length == 0 or any(c == 0 for c in clipped) \
            or any(t == 0 for t in totals):
        return 0.0
    log_precision = sum(0.25 * math.log(c / t) for c, t in zip(clipped, totals))
    brevity = 1.0 if candidate_length > reference_length \
        else math.exp(1.0 - reference_length / candidate_length)
    return brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# heat-map export
# ---------------------------------------------------------------------------

def _clip_range(step_range, n_steps: int) -> range:
    if step_range is None:
        return range(n_steps)
    start, end = step_range
    if start < 0 or end > n_steps:
        log.warning("step range (%d, %d) clipped to (0, %d)", start, end, n_steps)
    start = max(0, start)
    end = min(n_steps, end)
    return range(start, max(start, end))


def _fmt(value: float) -> str:
    # enough digits that quantization cannot push a row sum past 1e-6
    return f"{value:.9f}"


def export_heatmap(model, config: TrainConfig, prepared: PreparedCorpus,
                   split: str, example_index: int, out_dir,
                   step_range=None) -> list[Path]:
    """Write one CSV (and one rendered PNG) of per-step attention for one
    example.

    The CSV's first row is the per-step switch probability; each following
    row holds one step's distribution (over ingredient positions, table
    attributes/rows/columns/cells, or the entity set) and sums to 1.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    example = prepared.examples[split][example_index]
    stem = f"{config.task}_{split}_{example_index}"
    csv_path = out_dir / f"{stem}.csv"
    png_path = out_dir / f"{stem}.png"

    if config.task == "recipes":
        encoding = model.encode_ingredients(example.ingredients)
        position_labels = [f"{i}:{example.ingredient_surfaces[i][j]}"
                           for i, j in encoding.positions]
        rows = []
        for step, target, _, _ in model._steps(example):
            surface = ("_eos" if target == model.eos_id
                       else example.recipe_surfaces[len(rows)])
            rows.append((surface, float(step.switch_prob.data),
                         step.copy_probs.data.copy()))
        keep = _clip_range(step_range, len(rows))
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["switch"] + [_fmt(rows[v][1]) for v in keep])
            writer.writerow(["step", "target"] + position_labels)
            for v in keep:
                writer.writerow([v, rows[v][0]] + [_fmt(p) for p in rows[v][2]])
        matrix = np.vstack([[rows[v][1] for v in keep],
                            np.array([rows[v][2] for v in keep]).T])
        plotting.render_heatmap(
            matrix, ["switch"] + position_labels,
            [f"{v}:{rows[v][0]}" for v in keep], png_path,
            title="copy attention (columns are decode steps)")
    elif config.task == "dialogue":
        table = prepared.table
        attr_labels = list(table.attribute_surfaces)
        row_labels = [table.cell_surfaces[r][0] for r in range(table.num_rows)]
        cell_labels = [f"{row_labels[r]}|{attr_labels[c]}"
                       for r in range(table.num_rows)
                       for c in range(table.num_columns)]
        steps = []
        for step, pointer, target, _, _, m, v in model._steps(
                example, table, config.sentence_attention):
            machine_tokens = example.turn_surfaces[example.machine_turns()[m][0]]
            surface = "_eos" if v == len(machine_tokens) else machine_tokens[v]
            steps.append((m, v, surface, float(step.switch_prob.data),
                          pointer.p_attr.data.copy(), pointer.p_row.data.copy(),
                          pointer.p_col.data.copy(),
                          pointer.p_copy.data.reshape(-1).copy()))
        keep = _clip_range(step_range, len(steps))
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["switch"] + [_fmt(steps[s][3]) for s in keep])
            for block, labels, column in (("attributes", attr_labels, 4),
                                          ("rows", row_labels, 5),
                                          ("columns", attr_labels, 6),
                                          ("cells", cell_labels, 7)):
                writer.writerow([block, "utterance", "step", "target"] + labels)
                for s in keep:
                    entry = steps[s]
                    writer.writerow([block, entry[0], entry[1], entry[2]]
                                    + [_fmt(p) for p in entry[column]])
        matrix = np.array([steps[s][7] for s in keep])
        plotting.render_heatmap(
            matrix.T, cell_labels,
            [f"{steps[s][0]}.{steps[s][1]}:{steps[s][2]}" for s in keep],
            png_path, title="table cell attention (columns are decode steps)")
    elif config.task == "coref":
        trace = list(model.trace(example))
        final_entities = max(len(probs) for _, _, _, probs, _, _ in trace)
        keep = _clip_range(step_range, len(trace))
        entity_labels = ["virtual"] + [f"entity_{k}" for k in range(1, final_entities)]
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["switch"] + [_fmt(trace[i][4]) for i in keep])
            writer.writerow(["position", "target", "mention"] + entity_labels)
            for i in keep:
                position, token, decision, probs, _, _ = trace[i]
                surface = example.surfaces[position] if example.surfaces else str(token)
                writer.writerow([position, surface, decision[0]]
                                + [_fmt(p) for p in probs]
                                + [""] * (final_entities - len(probs)))
        matrix = np.zeros((len(keep), final_entities))
        col_labels = []
        for out_row, i in enumerate(keep):
            position, token, _, probs, _, _ = trace[i]
            matrix[out_row, :len(probs)] = probs
            col_labels.append(example.surfaces[position]
                              if example.surfaces else str(token))
        plotting.render_heatmap(matrix.T, entity_labels, col_labels, png_path,
                                title="entity attention (columns are positions)")
    else:
        raise ValueError(f"unknown task {config.task!r}")
    return [csv_path, png_path]
