"""Command-line interface: prepare / train / eval / generate / heatmap.

Every flag of ``train`` mirrors a TrainConfig field.  A flat key=value config
file may supply any flag via --config; explicit command-line flags win.
Exit status is 0 on success and 1 with a diagnostic on any rejected input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus, harness

log = logging.getLogger("reflm")


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# converters for values coming from a key=value config file
_CONFIG_TYPES = {
    "task": str, "mode": str, "split": str, "out": str, "corpus": str,
    "checkpoint": str, "init_checkpoint": str,
    "hidden_dim": int, "embed_dim": int, "attention_dim": int,
    "epochs": int, "batch_size": int, "seed": int, "fold": int,
    "max_vocab": int, "folds": int, "n_examples": int, "n_common": int,
    "n_heldout": int, "n_rows": int,
    "beam_width": int, "max_len": int, "example_index": int,
    "learning_rate": float, "clip_norm": float,
    "sentence_attention": _parse_bool, "synthetic": _parse_bool,
    "bleu": _parse_bool,
}


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _CONFIG_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown option {key!r}")
        values[key] = _CONFIG_TYPES[key](raw.strip())
    return values


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=("supervised", "latent", "vocab"),
                        default="latent")
    parser.add_argument("--hidden-dim", type=int, default=64)
    parser.add_argument("--embed-dim", type=int, default=32)
    parser.add_argument("--attention-dim", type=int, default=32)
    parser.add_argument("--learning-rate", type=float, default=0.5)
    parser.add_argument("--clip-norm", type=float, default=5.0)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--batch-size", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sentence-attention", action="store_true")
    parser.add_argument("--init-checkpoint", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reflm",
        description="Reference-aware language models: pointer mixtures over "
                    "ingredient lists, database tables, and entity context.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a prepared corpus directory")
    p.add_argument("--config", default=None)
    p.add_argument("--task", choices=harness.TASKS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", action="store_true",
                   help="generate a deterministic synthetic corpus")
    p.add_argument("--recipes-file", default=None)
    p.add_argument("--dialogues-file", default=None)
    p.add_argument("--table-file", default=None)
    p.add_argument("--coref-file", default=None)
    p.add_argument("--max-vocab", type=int, default=None)
    p.add_argument("--folds", type=int, default=None,
                   help="cross-validation folds instead of a ratio split")
    p.add_argument("--n-examples", type=int, default=None)
    p.add_argument("--n-common", type=int, default=None)
    p.add_argument("--n-heldout", type=int, default=None)
    p.add_argument("--n-rows", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a prepared corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True, help="prepared corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fold", type=int, default=None)
    _add_train_config_flags(p)

    p = sub.add_parser("eval", help="per-token-class perplexity report")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--mode", default=None,
                   help="override the scoring mode (defaults to training mode)")
    p.add_argument("--out", default=None, help="output directory for reports")

    p = sub.add_parser("generate", help="beam-search recipe generation")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam-width", type=int, default=10)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--example-index", type=int, default=None,
                   help="decode one example (default: whole split)")
    p.add_argument("--bleu", action="store_true",
                   help="score generated recipes against references")
    p.add_argument("--out", default=None, help="write generations to this file")

    p = sub.add_parser("heatmap", help="export per-step attention as CSV + PNG")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--example-index", type=int, default=0)
    p.add_argument("--steps", default=None, help="step range as start:end")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fold", type=int, default=None)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    values = read_config_file(path)
    for action in parser._subparsers._group_actions[0].choices.values():
        valid = {a.dest for a in action._actions}
        action.set_defaults(**{k: v for k, v in values.items() if k in valid})


def _load_split(args, split: str) -> corpus.PreparedCorpus:
    return corpus.load_prepared(args.corpus, split, fold=getattr(args, "fold", None))


def _train_config(args, task: str) -> harness.TrainConfig:
    return harness.TrainConfig(
        task=task, mode=args.mode, hidden_dim=args.hidden_dim,
        embed_dim=args.embed_dim, attention_dim=args.attention_dim,
        learning_rate=args.learning_rate, clip_norm=args.clip_norm,
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        sentence_attention=args.sentence_attention,
        init_checkpoint=args.init_checkpoint).validate()


def cmd_prepare(args) -> int:
    sizes = {name: getattr(args, name) for name in
             ("n_examples", "n_common", "n_heldout", "n_rows")
             if getattr(args, name) is not None}
    manifest = corpus.prepare_corpus(
        args.task, args.out, args.seed, synthetic=args.synthetic,
        recipes_file=args.recipes_file, dialogues_file=args.dialogues_file,
        table_file=args.table_file, coref_file=args.coref_file,
        max_vocab=args.max_vocab, folds=args.folds, **sizes)
    print(f"prepared {args.task} corpus in {args.out} "
          f"(vocab {manifest['vocab_size']})")
    return 0


def cmd_train(args) -> int:
    train_data = _load_split(args, "train")
    valid_data = _load_split(args, "valid")
    config = _train_config(args, train_data.task)
    result = harness.train(config, train_data.vocab,
                           train_data.examples["train"],
                           valid_data.examples["valid"],
                           table=train_data.table)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "checkpoint.json"
    harness.save_model(checkpoint, result.model, config, train_data.vocab,
                       extra={"best_epoch": result.best_epoch})
    harness.write_loss_log(result.loss_log, out_dir / "loss_log.csv",
                           out_dir / "loss_curve.png")
    final = result.loss_log[-1]
    print(f"trained {config.task}/{config.mode}: "
          f"train_nll={final['train_nll']:.4f} "
          f"valid_nll={final['valid_nll'] if final['valid_nll'] is not None else 'n/a'} "
          f"-> {checkpoint}")
    return 0


def cmd_eval(args) -> int:
    prepared = _load_split(args, args.split)
    model, config, _ = harness.load_model(args.checkpoint, prepared.vocab)
    report = harness.perplexity_report(model, config, prepared, args.split,
                                       mode=args.mode)
    payload = report.to_dict()
    print(json.dumps(payload, sort_keys=True, indent=2))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        harness.write_report(report, out_dir / "report.json",
                             out_dir / "report.csv")
    return 0


def cmd_generate(args) -> int:
    prepared = _load_split(args, args.split)
    if prepared.task != "recipes":
        raise ValueError("generate supports the recipes task")
    model, config, _ = harness.load_model(args.checkpoint, prepared.vocab)
    examples = prepared.examples[args.split]
    indices = ([args.example_index] if args.example_index is not None
               else range(len(examples)))
    eos_surface = prepared.vocab.decode(prepared.vocab.eos_id)
    outputs = []
    references = []
    for index in indices:
        example = examples[index]
        hyps = harness.beam_decode(model, prepared.vocab, example.ingredients,
                                   example.ingredient_surfaces,
                                   beam_width=args.beam_width,
                                   max_len=args.max_len)
        best = [t for t in hyps[0].tokens if t != eos_surface]
        outputs.append(" ".join(best))
        references.append(example.recipe_surfaces)
    for line in outputs:
        print(line)
    if args.bleu:
        score = harness.bleu([o.split() for o in outputs], references)
        print(f"BLEU: {score:.4f}")
    if args.out:
        Path(args.out).write_text("\n".join(outputs) + "\n", encoding="utf-8")
    return 0


def cmd_heatmap(args) -> int:
    prepared = _load_split(args, args.split)
    model, config, _ = harness.load_model(args.checkpoint, prepared.vocab)
    step_range = None
    if args.steps:
        start, _, end = args.steps.partition(":")
        step_range = (int(start), int(end))
    paths = harness.export_heatmap(model, config, prepared, args.split,
                                   args.example_index, args.out,
                                   step_range=step_range)
    for path in paths:
        print(path)
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "heatmap": cmd_heatmap,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, corpus.CorpusError,
            harness.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
