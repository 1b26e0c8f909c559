# ---------------------------------------------------
# metrics.py - BLEU-4, Accuracy and Model Evaluation
# ---------------------------------------------------
# Corpus-level smoothed BLEU-4 over whitespace tokens
# (add-one smoothing on the 2- to 4-gram precisions,
# brevity penalty exp(1 - r/c) when c < r) through
# sacrebleu, accuracy for label generation, and the
# evaluate() entry point that decodes a split with a
# model and scores it.
# ---------------------------------------------------

import logging
from dataclasses import asdict, dataclass

import numpy as np
import sacrebleu

from modules.errors import ConfigError, DataError
from modules.model import generate_greedy
from modules.tasks import EOS_ID, PAD_ID, decode

logger = logging.getLogger(__name__)

METRIC_RANGES = {"bleu4": (0.0, 100.0), "accuracy": (0.0, 1.0)}


class MetricError(DataError, ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    task_id: str
    metric: str
    value: float
    n_examples: int
    split: str = "test"

    def __post_init__(self):
        if self.metric not in METRIC_RANGES:
            raise ConfigError(f"unknown metric {self.metric!r}")
        low, high = METRIC_RANGES[self.metric]
        if not low <= self.value <= high:
            raise MetricError(f"{self.metric} value {self.value} outside [{low}, {high}]")
        if self.n_examples < 1:
            raise MetricError("an evaluation needs at least one example")

    def to_dict(self):
        return asdict(self)


def _as_text(tokens):
    return tokens if isinstance(tokens, str) else " ".join(tokens)


def bleu4_smoothed(hypotheses, references):
    """
    Corpus-level BLEU-4 in [0, 100]. Hypotheses and references are
    token lists (or pre-joined whitespace strings), one reference each.
    """
    if not hypotheses:
        raise MetricError("BLEU needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise MetricError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    refs = [_as_text(r) for r in references]
    if any(not r.split() for r in refs):
        raise MetricError("every reference must be non-empty")
    result = sacrebleu.corpus_bleu([_as_text(h) for h in hypotheses], [refs],
                                   smooth_method="add-k", smooth_value=1,
                                   tokenize="none", force=True)
    return min(max(float(result.score), 0.0), 100.0)


def accuracy(predicted, gold):
    if len(predicted) != len(gold):
        raise MetricError(f"{len(predicted)} predictions for {len(gold)} gold labels")
    if not gold:
        raise MetricError("accuracy of an empty list is undefined")
    hits = sum(1 for p, g in zip(predicted, gold) if p == g)
    return hits / len(gold)


def metric_for(kind):
    return "accuracy" if kind == "classification" else "bleu4"


def padded(rows, pad_id=PAD_ID):
    """ Right-pads a list of id sequences into an int64 array. """
    width = max(len(row) for row in rows)
    array = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, row in enumerate(rows):
        array[i, :len(row)] = row
    return array


def predict(backbone, prefix, examples, kind, vocab_label_ids, *, batch_size=32,
            max_len=None):
    """ Greedy outputs for the examples, without EOS. """
    max_len = max_len or backbone.config.max_target_len
    first_choices = vocab_label_ids if kind == "classification" else None
    if kind == "classification":
        max_len = 1
    outputs = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        source = padded([e.source_tokens for e in chunk])
        for row in generate_greedy(backbone, prefix, source, max_len,
                                   first_choices=first_choices):
            outputs.append([t for t in row if t != EOS_ID])
    return outputs


def evaluate(backbone, prefix, corpus, kind=None, *, vocab, split="test",
             batch_size=32, limit=None):
    """
    Decodes a split greedily and scores it: BLEU-4 for generation
    kinds, accuracy of the first generated token for classification.
    Truncated outputs (no EOS within max_len) are scored as they are.
    """
    kind = kind or corpus.task.kind
    examples = list(corpus.split(split))
    if limit is not None:
        examples = examples[:limit]
    if not examples:
        raise MetricError(f"{corpus.task.task_id} has no {split} examples to evaluate")
    if not corpus.encoded:
        raise DataError(f"{corpus.task.task_id} must be encoded before evaluation")
    outputs = predict(backbone, prefix, examples, kind, vocab.label_ids,
                      batch_size=batch_size)
    if kind == "classification":
        gold = [e.target_tokens[1] for e in examples]
        predicted = [row[0] if row else EOS_ID for row in outputs]
        value = accuracy(predicted, gold)
    else:
        hypotheses = [decode(row, vocab) for row in outputs]
        references = [decode(e.target_tokens, vocab) for e in examples]
        value = bleu4_smoothed(hypotheses, references)
    result = EvalResult(task_id=corpus.task.task_id, metric=metric_for(kind),
                        value=value, n_examples=len(examples), split=split)
    logger.debug("Evaluated %s on %s: %s=%.4f", corpus.task.task_id, split,
                 result.metric, result.value)
    return result
