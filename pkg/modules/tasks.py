# ---------------------------------------------------
# tasks.py - Tasks, Corpora and Vocabulary
# ---------------------------------------------------
# A module that contains the task and corpus types,
# the shared whitespace vocabulary, mini-language
# corpus generation, JSONL ingestion and low-resource
# subsampling. Corpora hold raw text until they are
# encoded against a vocabulary built over every task
# of an experiment, so all tasks share one id space.
# ---------------------------------------------------

import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

from modules import minilang
from modules.errors import ConfigError, DataError, IngestionError, InputError
from modules.seeding import stream

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
LABEL_TOKENS = ("<buggy>", "<clean>")
KINDS = ("summarization", "translation", "classification")
SPLITS = ("train", "dev", "test")


def label_token(label):
    """ Label names map onto <name> tokens, e.g. 'buggy' -> '<buggy>'. """
    label = str(label).strip()
    if label.startswith("<") and label.endswith(">"):
        return label
    return f"<{label}>"


def is_label_token(token):
    return (len(token) > 2 and token.startswith("<") and token.endswith(">")
            and token not in RESERVED_TOKENS)


def normalize(text):
    return " ".join(str(text).split())


# -------------------
#  TYPES
# -------------------
@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    source_language: str
    target_language: str = None
    dataset_path: str = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == "translation" and not self.target_language:
            raise ConfigError(f"translation task {self.task_id!r} needs a target_language")

    def to_dict(self):
        return {"task_id": self.task_id, "kind": self.kind,
                "source_language": self.source_language,
                "target_language": self.target_language,
                "dataset_path": self.dataset_path}


@dataclass(frozen=True)
class Example:
    raw_source: str
    raw_target: str
    source_tokens: tuple = ()
    target_tokens: tuple = ()


class Vocab:

    def __init__(self, tokens):
        """
        Token <-> id bijection. The first four ids are always the
        reserved PAD, BOS, EOS and UNK tokens.
        """
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {token: i for i, token in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id_of(self, token):
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id):
        return self.tokens[token_id]

    @property
    def label_ids(self):
        return [i for i, token in enumerate(self.tokens) if is_label_token(token)]

    def checksum(self):
        joined = "\n".join(self.tokens).encode("utf-8")
        return hashlib.sha256(joined).hexdigest()[:16]

    def to_json(self):
        return json.dumps({"tokens": self.tokens, "checksum": self.checksum()},
                          indent=1)

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as file:
            return cls(json.loads(file.read())["tokens"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")


@dataclass(frozen=True)
class Corpus:
    task: TaskSpec
    train: tuple
    dev: tuple = ()
    test: tuple = ()
    seed: int = None
    vocab_checksum: str = None

    def __post_init__(self):
        if len(self.train) < 1:
            raise DataError(f"corpus {self.task.task_id!r} has an empty train split")
        seen = {}
        for split in SPLITS:
            for example in getattr(self, split):
                owner = seen.setdefault(example.raw_source, split)
                if owner != split:
                    raise DataError(f"corpus {self.task.task_id!r}: source appears "
                                    f"in both {owner} and {split}")

    @property
    def encoded(self):
        return self.vocab_checksum is not None

    def split(self, name):
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def sizes(self):
        return {name: len(getattr(self, name)) for name in SPLITS}

    def encode_with(self, vocab):
        """ Returns a copy whose examples carry token ids for vocab. """
        def encode_split(examples):
            return tuple(encode_example(e.raw_source, e.raw_target, vocab)
                         for e in examples)
        return replace(self, train=encode_split(self.train), dev=encode_split(self.dev),
                       test=encode_split(self.test), vocab_checksum=vocab.checksum())

    def manifest(self, *, extra=None):
        manifest = {"task_id": self.task.task_id, "kind": self.task.kind,
                    "task": self.task.to_dict(), "sizes": self.sizes(),
                    "seed": self.seed, "vocab_checksum": self.vocab_checksum}
        manifest.update(extra or {})
        return manifest


# -------------------
#  VOCABULARY
# -------------------
def build_vocab(corpora):
    """ Reserved tokens, then label tokens, then every other token sorted. """
    if not corpora:
        raise ConfigError("build_vocab needs at least one corpus")
    seen = set()
    for corpus in corpora:
        for name in SPLITS:
            for example in corpus.split(name):
                seen.update(example.raw_source.split())
                seen.update(example.raw_target.split())
    special = set(RESERVED_TOKENS) | set(LABEL_TOKENS)
    return Vocab(list(RESERVED_TOKENS) + list(LABEL_TOKENS)
                 + sorted(seen - special))


def encode(text, vocab, *, role="source"):
    """
    Whitespace tokenization. Targets are wrapped in BOS/EOS; an
    empty source is an error.
    """
    ids = [vocab.id_of(token) for token in str(text).split()]
    if role == "target":
        return [BOS_ID] + ids + [EOS_ID]
    if not ids:
        raise InputError("source text is empty")
    return ids


def decode(ids, vocab):
    """ Inverse of encode on UNK-free text; drops PAD/BOS/EOS. """
    skipped = (PAD_ID, BOS_ID, EOS_ID)
    return " ".join(vocab.token_of(int(i)) for i in ids if int(i) not in skipped)


def encode_example(raw_source, raw_target, vocab):
    return Example(raw_source=raw_source, raw_target=raw_target,
                   source_tokens=tuple(encode(raw_source, vocab, role="source")),
                   target_tokens=tuple(encode(raw_target, vocab, role="target")))


# -------------------
#  GENERATION
# -------------------
def task_id_for(language, kind):
    return f"{language}-{kind}"


def other_language(language):
    return "beta" if language == "alpha" else "alpha"


def generate_minilang_corpus(language, kind, n_train, n_dev, n_test, seed):
    """
    Generates a raw mini-language corpus, fully determined by its
    arguments. Classification labels alternate buggy/clean by example
    index; splits are disjoint on the source text.
    """
    if language not in minilang.LANGUAGES:
        raise ConfigError(f"unknown mini-language {language!r}")
    if kind not in KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    if min(n_train, n_dev, n_test) < 1:
        raise ConfigError("corpus split sizes must all be >= 1")

    target_language = other_language(language) if kind == "translation" else None
    task = TaskSpec(task_id=task_id_for(language, kind), kind=kind,
                    source_language=language, target_language=target_language)
    generator = minilang.ProgramGenerator(stream(seed, "minilang", language, kind))
    total = n_train + n_dev + n_test
    examples, seen = [], set()
    attempts = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 50 * total:
            raise DataError(f"could not draw {total} distinct programs for {task.task_id}")
        buggy = kind == "classification" and len(examples) % 2 == 0
        program = generator.generate(buggy=buggy)
        source = minilang.render(program, language)
        if source in seen:
            continue
        seen.add(source)
        if kind == "summarization":
            target = minilang.describe(program)
        elif kind == "translation":
            target = minilang.render(program, target_language)
        else:
            target = LABEL_TOKENS[0] if buggy else LABEL_TOKENS[1]
        examples.append(Example(raw_source=source, raw_target=target))

    logger.info("Generated %s corpus: %d/%d/%d examples (seed %d)",
                task.task_id, n_train, n_dev, n_test, seed)
    return Corpus(task=task, train=tuple(examples[:n_train]),
                  dev=tuple(examples[n_train:n_train + n_dev]),
                  test=tuple(examples[n_train + n_dev:]), seed=seed)


# -------------------
#  JSONL INGESTION
# -------------------
def _read_jsonl(path, task):
    text = Path(path).read_bytes().decode("utf-8")
    examples, bad_lines = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            bad_lines.append(number)
            continue
        if not isinstance(record, dict):
            bad_lines.append(number)
            continue
        target = record.get("target")
        if task.kind == "classification" and "label" in record:
            target = label_token(record["label"])
        source = record.get("source")
        if not isinstance(source, str) or not isinstance(target, str):
            bad_lines.append(number)
            continue
        examples.append(Example(raw_source=normalize(source),
                                raw_target=normalize(target)))
    if bad_lines:
        raise IngestionError(f"{path}: malformed or incomplete records",
                             lines=bad_lines)
    return tuple(examples)


def load_jsonl(path, vocab, task):
    """
    Loads a corpus from a JSONL file (all lines become the train split)
    or from a directory holding train/dev/test .jsonl files. Encodes
    against vocab when one is given.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset {path} does not exist")
    splits = {}
    if path.is_dir():
        for name in SPLITS:
            split_path = path / f"{name}.jsonl"
            splits[name] = _read_jsonl(split_path, task) if split_path.exists() else ()
    else:
        splits["train"] = _read_jsonl(path, task)
    seed = None
    manifest_path = path / "manifest.json" if path.is_dir() else None
    if manifest_path is not None and manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as file:
            seed = json.loads(file.read()).get("seed")
    corpus = Corpus(task=task, train=splits.get("train", ()), dev=splits.get("dev", ()),
                    test=splits.get("test", ()), seed=seed)
    return corpus.encode_with(vocab) if vocab is not None else corpus


def write_jsonl(examples, path):
    lines = [json.dumps({"source": e.raw_source, "target": e.raw_target},
                        ensure_ascii=False) for e in examples]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# -------------------
#  LOW RESOURCE
# -------------------
def subsample(corpus, rate, seed):
    """
    Keeps ceil(rate * |train|) training examples drawn uniformly without
    replacement (original order kept); dev and test are untouched.
    """
    if not 0 < rate <= 1:
        raise ConfigError(f"subsample rate must lie in (0, 1], got {rate}")
    size = len(corpus.train)
    keep = min(size, math.ceil(round(rate * size, 9)))
    if keep == size:
        return corpus
    rng = stream(seed, "subsample", corpus.task.task_id)
    chosen = sorted(int(i) for i in rng.choice(size, size=keep, replace=False))
    logger.info("Subsampled %s train split at rate %.2f: %d of %d examples",
                corpus.task.task_id, rate, keep, size)
    return replace(corpus, train=tuple(corpus.train[i] for i in chosen))
