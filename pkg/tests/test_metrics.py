from dataclasses import replace

import pytest

from modules import autodiff as ad
from modules.checkpoint import load
from modules.errors import ConfigError
from modules.metrics import (EvalResult, MetricError, accuracy, bleu4_smoothed, evaluate,
                             metric_for, predict)
from modules.model import sequence_loss
from modules.optim import Adam
from modules.trainer import collate


def test_bleu_of_identical_text_is_100():
    texts = ["a b c d", "print x ;", "set a to n plus 3"]
    assert bleu4_smoothed(texts, texts) == 100.0


def test_bleu_brevity_penalty_case():
    assert bleu4_smoothed([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]]) == \
        pytest.approx(77.88, abs=0.01)


def test_bleu_without_overlap_is_zero():
    assert bleu4_smoothed(["w x y z"], ["a b c d"]) == pytest.approx(0.0, abs=1e-6)


def test_bleu_ignores_example_order():
    hypotheses = ["a b c", "let a = 1 ;", "print n"]
    references = ["a b c d", "let a = 2 ;", "print n ;"]
    forward = bleu4_smoothed(hypotheses, references)
    backward = bleu4_smoothed(hypotheses[::-1], references[::-1])
    assert forward == pytest.approx(backward, abs=1e-9)


def test_bleu_input_errors():
    with pytest.raises(MetricError):
        bleu4_smoothed([], [])
    with pytest.raises(MetricError):
        bleu4_smoothed(["a"], ["a", "b"])
    with pytest.raises(MetricError):
        bleu4_smoothed(["a"], [""])


def test_accuracy():
    assert accuracy([4, 5, 4, 4], [4, 5, 5, 5]) == 0.5
    assert accuracy([4, 5], [4, 5]) == 1.0
    with pytest.raises(MetricError):
        accuracy([], [])
    with pytest.raises(MetricError):
        accuracy([4], [4, 5])


def test_eval_result_ranges():
    assert EvalResult("t", "bleu4", 55.0, 3).to_dict()["split"] == "test"
    with pytest.raises(MetricError):
        EvalResult("t", "accuracy", 1.5, 3)
    with pytest.raises(MetricError):
        EvalResult("t", "bleu4", 10.0, 0)
    with pytest.raises(ConfigError):
        EvalResult("t", "rouge", 0.5, 3)


def test_metric_for_kind():
    assert metric_for("classification") == "accuracy"
    assert metric_for("translation") == metric_for("summarization") == "bleu4"


def test_classification_is_label_constrained(corpora, base):
    vocab, data = corpora
    backbone = load(base)
    corpus = data["beta-classification"]
    outputs = predict(backbone, None, list(corpus.dev), "classification", vocab.label_ids)
    assert all(len(row) == 1 and row[0] in vocab.label_ids for row in outputs)

    first = evaluate(backbone, None, corpus, vocab=vocab, split="dev")
    second = evaluate(backbone, None, corpus, vocab=vocab, split="dev")
    assert first == second
    assert first.metric == "accuracy" and first.n_examples == 6
    assert 0.0 <= first.value <= 1.0


def test_generation_evaluation_in_range(corpora, base):
    vocab, data = corpora
    result = evaluate(load(base), None, data["alpha-summarization"], vocab=vocab,
                      limit=3)
    assert result.metric == "bleu4" and result.n_examples == 3
    assert 0.0 <= result.value <= 100.0


def test_evaluate_needs_examples(corpora, base):
    vocab, data = corpora
    with pytest.raises(MetricError):
        evaluate(load(base), None, data["alpha-summarization"], vocab=vocab, limit=0)


def test_memorized_summary_scores_full_bleu(corpora, base):
    vocab, data = corpora
    corpus = data["alpha-summarization"]
    example = min(corpus.train, key=lambda e: len(e.target_tokens))
    rest = tuple(e for e in corpus.train if e is not example)
    memorized = replace(corpus, train=rest, dev=(), test=(example,))

    backbone = load(base)
    source, target = collate([example])
    optimizer = Adam(backbone.parameters(), lr=1e-2)
    for _ in range(300):
        optimizer.zero_grad()
        loss = sequence_loss(backbone, None, source, target)
        ad.backward(loss)
        optimizer.step()
    assert loss.item() < 0.05

    result = evaluate(backbone, None, memorized, vocab=vocab)
    assert result.n_examples == 1
    assert result.value == pytest.approx(100.0)
