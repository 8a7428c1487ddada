import csv
import json
import math

import numpy as np
import pytest

from reflm import corpus, harness, numcore as nc
from reflm.harness import TrainConfig


def small_config(task="recipes", **overrides):
    base = dict(task=task, mode="latent", hidden_dim=8, embed_dim=4,
                attention_dim=4, learning_rate=0.3, clip_norm=5.0, epochs=2,
                seed=0)
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def recipe_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("recipes")
    corpus.prepare_corpus("recipes", out, seed=1, synthetic=True,
                          n_examples=30, n_common=10, n_heldout=12,
                          max_vocab=300)
    return out


@pytest.fixture(scope="module")
def prepared_train(recipe_corpus):
    return corpus.load_prepared(recipe_corpus, "train")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(task="poetry").validate()
    with pytest.raises(ValueError):
        TrainConfig(task="recipes", hidden_dim=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(task="coref", mode="latent").validate()
    with pytest.raises(ValueError):
        TrainConfig(task="recipes", learning_rate=-1.0).validate()
    assert TrainConfig(task="coref", mode="supervised").validate()


def test_one_example_training_decreases_nll(prepared_train):
    config = small_config(epochs=1, learning_rate=0.1)
    examples = prepared_train.examples["train"][:1]
    model = harness.build_model(config, prepared_train.vocab)
    before = harness.mean_corpus_nll(model, config, examples)
    result = harness.train(config, prepared_train.vocab, examples)
    after = harness.mean_corpus_nll(result.model, config, examples)
    assert after < before


def test_infinite_clip_matches_manual_unclipped_sgd(prepared_train):
    config = small_config(epochs=1, learning_rate=0.05, clip_norm=math.inf)
    examples = prepared_train.examples["train"][:4]
    result = harness.train(config, prepared_train.vocab, examples)

    # independent plain-SGD replay with the same shuffle stream
    model = harness.build_model(config, prepared_train.vocab)
    params = list(model.named_params().values())
    order = np.random.default_rng(config.seed).permutation(len(examples))
    for index in order:
        example = examples[int(index)]
        nc.zero_grad(params)
        with nc.record() as tape:
            loss = nc.scale(model.sequence_nll(example, config.mode),
                            1.0 / (len(example.recipe) + 1))
            nc.backward(loss, tape)
        for p in params:
            if p.grad is not None:
                p.data = p.data - config.learning_rate * p.grad
    for (name, trained), manual in zip(sorted(result.model.named_params().items()),
                                       [t for _, t in sorted(model.named_params().items())]):
        np.testing.assert_array_equal(trained.data, manual.data, err_msg=name)


def test_training_deterministic(prepared_train, recipe_corpus, tmp_path):
    config = small_config(epochs=2)
    examples = prepared_train.examples["train"][:6]
    valid = corpus.load_prepared(recipe_corpus, "valid").examples["valid"][:3]
    a = harness.train(config, prepared_train.vocab, examples, valid)
    b = harness.train(config, prepared_train.vocab, examples, valid)
    assert a.loss_log == b.loss_log
    harness.save_model(tmp_path / "a.json", a.model, config, prepared_train.vocab)
    harness.save_model(tmp_path / "b.json", b.model, config, prepared_train.vocab)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_training_aborts_on_nonfinite_loss(prepared_train, monkeypatch):
    # the primitives are saturating-safe, so inject a NaN to hit the abort path
    config = small_config(epochs=1)
    examples = prepared_train.examples["train"][:3]
    real = harness.example_nll
    state = {"calls": 0}

    def poisoned(model, cfg, example, table=None):
        state["calls"] += 1
        nll = real(model, cfg, example, table)
        if state["calls"] == 2:
            nll.data = np.float64("nan")
        return nll

    monkeypatch.setattr(harness, "example_nll", poisoned)
    with pytest.raises(harness.TrainingError, match="non-finite loss at epoch 0"):
        harness.train(config, prepared_train.vocab, examples)


def test_training_rejects_empty_corpus(prepared_train):
    with pytest.raises(harness.TrainingError, match="no training examples"):
        harness.train(small_config(), prepared_train.vocab, [])


def test_checkpoint_roundtrip_evaluation_bitwise(prepared_train, tmp_path):
    config = small_config(epochs=1)
    examples = prepared_train.examples["train"][:4]
    result = harness.train(config, prepared_train.vocab, examples)
    before = harness.mean_corpus_nll(result.model, config, examples)
    path = tmp_path / "ckpt.json"
    harness.save_model(path, result.model, config, prepared_train.vocab)
    loaded, loaded_config, meta = harness.load_model(path, prepared_train.vocab)
    assert loaded_config.to_dict() == config.to_dict()
    assert meta["build"] == harness.build_id()
    after = harness.mean_corpus_nll(loaded, loaded_config, examples)
    assert before == after  # bitwise identical evaluation


def test_uniform_model_all_ppl_equals_vocab_size(prepared_train):
    config = small_config(mode="vocab")
    model = harness.build_model(config, prepared_train.vocab)
    for tensor in model.named_params().values():
        tensor.data[...] = 0.0
    report = harness.perplexity_report(model, config, prepared_train, "train",
                                       mode="vocab")
    # in-vocabulary tokens all score exactly 1/V; OOV spreading only lowers
    # the "all" perplexity rows for reference_oov, so check the word class
    assert report.classes["word"].perplexity == \
        pytest.approx(prepared_train.vocab.size, rel=1e-9)


def test_perplexity_report_matches_brute_force_product(prepared_train):
    config = small_config()
    model = harness.build_model(config, prepared_train.vocab)
    prepared = prepared_train
    examples = prepared.examples["train"][:2]
    view = corpus.PreparedCorpus(task="recipes", vocab=prepared.vocab,
                                 manifest=prepared.manifest,
                                 examples={"train": examples},
                                 surface_docs={},
                                 table=None)
    report = harness.perplexity_report(model, config, view, "train")

    # oracle: recompute every token probability from raw decode steps and
    # multiply, classifying tokens straight from the example fields
    oov = {s for ex in examples for s in ex.recipe_surfaces
           if s not in prepared.vocab}
    spread = max(1, len(oov))
    products = {"all": [], "reference": [], "word": [], "reference_oov": []}
    for ex in examples:
        encoding = model.encode_ingredients(ex.ingredients)
        state, context = encoding.init_state, model.initial_context()
        prev_tokens = [model.bos_id] + list(ex.recipe)
        targets = list(ex.recipe) + [model.eos_id]
        all_cands = [[encoding.flat_index(i, j) for i, j in c]
                     for c in ex.copy_candidates] + [[]]
        surfaces = list(ex.recipe_surfaces) + [None]
        for prev, target, cands, surface in zip(prev_tokens, targets,
                                                all_cands, surfaces):
            step = model.decode_step(prev, state, context, encoding.token_states)
            state, context = step.state, step.context
            pi = float(step.switch_prob.data)
            is_oov = surface is not None and surface not in prepared.vocab
            p_vocab = float(step.vocab_probs.data[target]) / (spread if is_oov else 1)
            p_copy = float(step.copy_probs.data[cands].sum()) if cands else 0.0
            p = p_vocab * (1 - pi) + p_copy * pi
            products["all"].append(p)
            products["reference" if cands else "word"].append(p)
            if cands and is_oov:
                products["reference_oov"].append(p)

    for name, probs in products.items():
        stats = report.classes[name]
        assert stats.count == len(probs)
        if probs:
            expected = math.prod(probs) ** (-1.0 / len(probs))
            assert stats.perplexity == pytest.approx(expected, rel=1e-9)
        else:
            assert stats.perplexity is None


def test_report_serialization(prepared_train, tmp_path):
    config = small_config()
    model = harness.build_model(config, prepared_train.vocab)
    report = harness.perplexity_report(model, config, prepared_train, "train")
    harness.write_report(report, tmp_path / "report.json", tmp_path / "report.csv")
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["config"]["hidden_dim"] == config.hidden_dim
    assert payload["build"]
    assert payload["classes"]["all"]["count"] > 0
    rows = list(csv.reader((tmp_path / "report.csv").open()))
    assert rows[0] == ["class", "count", "perplexity"]
    # determinism: a second write is byte-identical
    harness.write_report(report, tmp_path / "report2.json")
    assert (tmp_path / "report.json").read_bytes() == \
        (tmp_path / "report2.json").read_bytes()


def test_beam_width_one_equals_greedy(prepared_train):
    config = small_config()
    model = harness.build_model(config, prepared_train.vocab)
    example = prepared_train.examples["train"][0]
    greedy = harness.greedy_decode(model, prepared_train.vocab,
                                   example.ingredients,
                                   example.ingredient_surfaces, max_len=8)
    beam = harness.beam_decode(model, prepared_train.vocab, example.ingredients,
                               example.ingredient_surfaces, beam_width=1,
                               max_len=8)
    assert len(beam) == 1
    assert beam[0].tokens == greedy.tokens
    assert beam[0].log_prob == pytest.approx(greedy.log_prob, rel=1e-12)


def test_beam_results_sorted_and_unique(prepared_train):
    config = small_config()
    model = harness.build_model(config, prepared_train.vocab)
    example = prepared_train.examples["train"][1]
    hyps = harness.beam_decode(model, prepared_train.vocab, example.ingredients,
                               example.ingredient_surfaces, beam_width=5,
                               max_len=5)
    assert len(hyps) == 5
    log_probs = [h.log_prob for h in hyps]
    assert log_probs == sorted(log_probs, reverse=True)
    assert len({h.tokens for h in hyps}) == 5
    assert all(h.finished for h in hyps)


def test_bleu_identity_and_disjoint():
    assert harness.bleu([["a", "b", "c", "d", "e"]],
                        [["a", "b", "c", "d", "e"]]) == pytest.approx(1.0)
    assert harness.bleu([["x", "y", "z", "w"]],
                        [["a", "b", "c", "d"]]) == 0.0
    assert harness.bleu([[]], [["a", "b"]]) == 0.0


def test_bleu_matches_hand_computation():
    candidates = [["the", "cat", "sat", "on", "the", "mat"], ["a", "b", "c", "d"]]
    references = [["the", "cat", "is", "on", "the", "mat"], ["a", "b", "c", "d"]]
    # clipped counts, by hand:
    #   1-grams 5+4 of 6+4; 2-grams 3+3 of 5+3; 3-grams 1+2 of 4+2; 4-grams 0+1 of 3+1
    expected = math.exp(0.25 * (math.log(9 / 10) + math.log(6 / 8)
                                + math.log(3 / 6) + math.log(1 / 4)))
    # candidate and reference lengths match, so no brevity penalty
    assert harness.bleu(candidates, references) == pytest.approx(expected, rel=1e-9)


def test_bleu_rejects_misaligned():
    with pytest.raises(ValueError):
        harness.bleu([["a"]], [])


def read_heatmap_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_recipe_heatmap_export(prepared_train, tmp_path):
    config = small_config()
    model = harness.build_model(config, prepared_train.vocab)
    csv_path, png_path = harness.export_heatmap(model, config, prepared_train,
                                                "train", 0, tmp_path)
    assert png_path.exists()
    rows = read_heatmap_rows(csv_path)
    example = prepared_train.examples["train"][0]
    n_steps = len(example.recipe) + 1
    # first row is the per-step switch probability sequence
    assert rows[0][0] == "switch"
    assert len(rows[0]) == 1 + n_steps
    pis = [float(x) for x in rows[0][1:]]
    scores = model.score_tokens(example)
    np.testing.assert_allclose(pis, [s.switch_prob for s in scores], atol=1e-6)
    # each step row is a distribution over ingredient positions
    for row in rows[2:]:
        values = [float(x) for x in row[2:]]
        assert abs(sum(values) - 1.0) < 1e-6


def test_dialogue_heatmap_export(tmp_path):
    out = tmp_path / "corpus"
    corpus.prepare_corpus("dialogue", out, seed=2, synthetic=True,
                          n_examples=20, max_vocab=300)
    prepared = corpus.load_prepared(out, "train")
    config = small_config(task="dialogue", mode="supervised")
    model = harness.build_model(config, prepared.vocab)
    csv_path, png_path = harness.export_heatmap(model, config, prepared,
                                                "train", 0, tmp_path,
                                                step_range=(0, 6))
    assert png_path.exists()
    rows = read_heatmap_rows(csv_path)
    assert rows[0][0] == "switch"
    blocks = {}
    current = None
    for row in rows[1:]:
        if row[1] == "utterance":  # block header line
            current = row[0]
            blocks[current] = []
        else:
            blocks[current].append([float(x) for x in row[4:]])
    assert set(blocks) == {"attributes", "rows", "columns", "cells"}
    for name, dist_rows in blocks.items():
        assert dist_rows
        for values in dist_rows:
            assert abs(sum(values) - 1.0) < 1e-6, name


def test_coref_heatmap_export(tmp_path):
    out = tmp_path / "corpus"
    corpus.prepare_corpus("coref", out, seed=3, synthetic=True,
                          n_examples=12, max_vocab=300)
    prepared = corpus.load_prepared(out, "train")
    config = small_config(task="coref", mode="supervised")
    model = harness.build_model(config, prepared.vocab)
    csv_path, png_path = harness.export_heatmap(model, config, prepared,
                                                "train", 0, tmp_path)
    assert png_path.exists()
    rows = read_heatmap_rows(csv_path)
    assert rows[0][0] == "switch"
    for row in rows[2:]:
        values = [float(x) for x in row[3:] if x != ""]
        assert abs(sum(values) - 1.0) < 1e-6


def test_trained_heatmap_concentrates_on_answer_cell(tmp_path):
    # two restaurants with complementary missing fields, so the asked
    # attribute identifies both the row and the column of the answer
    import json as json_mod
    import random

    rng = random.Random(3)
    table = corpus.RawTable(
        attributes=["name", "area", "address", "phone"],
        rows=[["golden palace", "north", "", "01223 300111"],
              ["happy garden", "south", "7 rose lane", ""]])
    corpus.save_table_csv(tmp_path / "table.csv", table)
    with open(tmp_path / "dialogues.jsonl", "w", encoding="utf-8") as fh:
        for _ in range(150):
            if rng.random() < 0.5:
                name, attr, cell = "golden palace", "phone number", "01223 300111"
            else:
                name, attr, cell = "happy garden", "address", "7 rose lane"
            turns = [
                {"speaker": "M", "text": "hello , how may i help you ?"},
                {"speaker": "U", "text": f"what is the {attr} of {name}"},
                {"speaker": "M", "text": f"the {attr} of {name} is {cell}"},
                {"speaker": "U", "text": "thank you good bye"},
            ]
            fh.write(json_mod.dumps({"turns": turns}) + "\n")
    examples, encoded_table, vocab = corpus.load_dialogues(
        tmp_path / "dialogues.jsonl", tmp_path / "table.csv", max_vocab=100)

    config = small_config(task="dialogue", mode="supervised", hidden_dim=16,
                          embed_dim=8, attention_dim=8, learning_rate=2.0,
                          epochs=12)
    result = harness.train(config, vocab, examples[:130], examples[130:140],
                           table=encoded_table)
    prepared = corpus.PreparedCorpus(task="dialogue", vocab=vocab, manifest={},
                                     examples={"valid": examples[140:]},
                                     surface_docs={}, table=encoded_table)
    csv_path, _ = harness.export_heatmap(result.model, config, prepared,
                                         "valid", 0, tmp_path / "maps")
    rows = read_heatmap_rows(csv_path)
    cell_header = None
    answer_row = None
    example = examples[140]
    answer_surface = example.turn_surfaces[2][-1]
    assert answer_surface in ("_phone_0", "_addr_1")
    for row in rows[1:]:
        if row[0] == "cells" and row[1] == "utterance":
            cell_header = row[4:]
        elif cell_header is not None and row[0] == "cells" \
                and row[1] == "1" and row[3] == answer_surface:
            answer_row = [float(x) for x in row[4:]]
    assert answer_row is not None
    best = max(range(len(answer_row)), key=answer_row.__getitem__)
    assert answer_row[best] > 0.5, f"max copy mass {answer_row[best]:.3f}"
    assert answer_surface.split("_")[1] in cell_header[best]


def test_heatmap_step_range_clipped(prepared_train, tmp_path, caplog):
    config = small_config()
    model = harness.build_model(config, prepared_train.vocab)
    with caplog.at_level("WARNING"):
        csv_path, _ = harness.export_heatmap(model, config, prepared_train,
                                             "train", 0, tmp_path,
                                             step_range=(0, 10_000))
    assert "clipped" in caplog.text
    assert csv_path.exists()
