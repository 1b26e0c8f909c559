# ---------------------------------------------------
# commands.py - Command Line Verbs
# ---------------------------------------------------
# One function per CLI verb. Commands read and write
# artifacts under the configured output directory:
#
#   data/vocab.json
#   data/<task_id>/{train,dev,test}.jsonl, manifest.json
#   base/backbone.json, base/report.json
#   source/<name>/prefix.json, report.json, losses.csv
#   target/<name>/backbone.json, prefix.json, report.json
#   suites/<name>/...
#
# and never modify the outputs of another command.
# ---------------------------------------------------

import json
import logging
from dataclasses import replace
from pathlib import Path

from modules.checkpoint import (BackboneSnapshot, load, load_prefix, read_digest,
                               save_prefix, snapshot)
from modules.errors import ConfigError, DataError, StateError
from modules.metrics import evaluate
from modules.model import PrefixBank, collapse_prefix_encoder
from modules.reports import TrainReport, format_table, loss_trace_csv
from modules.tasks import (SPLITS, TaskSpec, Vocab, build_vocab, generate_minilang_corpus,
                           load_jsonl, write_jsonl)
from modules.trainer import (low_resource_outcome, pretrain_backbone, specify_target,
                             train_source)

logger = logging.getLogger(__name__)

SOURCE_PRESETS = {
    "cross-task": ["alpha-summarization", "alpha-classification"],
    "cross-language": ["alpha-summarization", "alpha-translation", "alpha-classification"],
}


class Workspace:

    def __init__(self, root):
        """ Paths of every artifact kept under one output directory. """
        self.root = Path(root)
        self.data_dir = self.root / "data"
        self.vocab_path = self.data_dir / "vocab.json"
        self.base_path = self.root / "base" / "backbone.json"

    def corpus_dir(self, task_id):
        return self.data_dir / task_id

    def source_dir(self, name):
        return self.root / "source" / name

    def target_dir(self, name):
        return self.root / "target" / name

    def suite_dir(self, name):
        return self.root / "suites" / name


# -------------------
#  DATA ACCESS
# -------------------
def load_data(config):
    """ Returns (vocab, {task_id: Corpus}) from the data directory. """
    workspace = Workspace(config.output_dir)
    if not workspace.vocab_path.exists():
        raise DataError(f"no corpora under {workspace.data_dir}; run gen-data first")
    vocab = Vocab.read(workspace.vocab_path)
    corpora = {}
    for manifest_path in sorted(workspace.data_dir.glob("*/manifest.json")):
        with open(manifest_path, encoding="utf-8") as file:
            manifest = json.loads(file.read())
        task = TaskSpec(**manifest["task"])
        corpora[task.task_id] = load_jsonl(manifest_path.parent, vocab, task)
    return vocab, corpora


def pick_corpora(corpora, task_ids):
    missing = [task_id for task_id in task_ids if task_id not in corpora]
    if missing:
        raise DataError(f"unknown task(s) {missing}; available: {sorted(corpora)}")
    return [(corpora[task_id].task, corpora[task_id]) for task_id in task_ids]


def target_corpus(config, corpora, task_id=None):
    """ The target task with its train split cut to target.train_size. """
    task_id = task_id or config["target"]["task"]
    (task, corpus), = pick_corpora(corpora, [task_id])
    size = config["target"]["train_size"]
    if size is not None and size < len(corpus.train):
        corpus = replace(corpus, train=corpus.train[:size])
    return task, corpus


def read_base(config):
    path = Workspace(config.output_dir).base_path
    if not path.exists():
        raise DataError(f"no base backbone at {path}; run pretrain-base first")
    return BackboneSnapshot.read(path)


def parse_order(text):
    """ 'a,b,c' -> ['a', 'b', 'c']. """
    order = [part.strip() for part in str(text).split(",") if part.strip()]
    if not order:
        raise ConfigError(f"empty task order {text!r}")
    return order


def run_seed(config, seed):
    return config.seeds[0] if seed is None else int(seed)


# -------------------
#  VERBS
# -------------------
def cmd_gen_data(config, *, force=False):
    """ Generates every configured corpus and the shared vocabulary. """
    workspace = Workspace(config.output_dir)
    if workspace.data_dir.exists() and any(workspace.data_dir.iterdir()) and not force:
        raise ConfigError(f"{workspace.data_dir} already holds data; pass --force "
                          f"to regenerate it")
    data = config["data"]
    corpora = [generate_minilang_corpus(language, kind, config.train_size(language, kind),
                                        data["dev"], data["test"], data["seed"])
               for language in data["languages"] for kind in data["kinds"]]
    sources = {corpus.task.task_id: "minilang" for corpus in corpora}
    for entry in data["jsonl"]:
        task = TaskSpec(task_id=entry["task_id"], kind=entry["kind"],
                        source_language=entry["source_language"],
                        target_language=entry.get("target_language"),
                        dataset_path=entry["path"])
        corpora.append(load_jsonl(entry["path"], None, task))
        sources[task.task_id] = "jsonl"

    vocab = build_vocab(corpora)
    workspace.data_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(workspace.vocab_path)
    written = []
    for corpus in corpora:
        corpus = corpus.encode_with(vocab)
        directory = workspace.corpus_dir(corpus.task.task_id)
        directory.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            write_jsonl(corpus.split(split), directory / f"{split}.jsonl")
        manifest = corpus.manifest(extra={"generator": sources[corpus.task.task_id],
                                          "config_fingerprint": config.fingerprint})
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n",
                                                 encoding="utf-8")
        written.append(directory)
    logger.info("Wrote %d corpora and a vocabulary of %d tokens to %s", len(written),
                len(vocab), workspace.data_dir)
    return written


def cmd_pretrain_base(config, *, progress=None):
    """ Denoising pass over the unimodal program texts; saves the base snapshot. """
    vocab, corpora = load_data(config)
    if not corpora:
        raise DataError("no corpora found; run gen-data first")
    settings = config["pretrain"]
    base, report = pretrain_backbone(config.model_config(vocab_size=len(vocab)),
                                     list(corpora.values()), settings["seed"],
                                     steps=settings["steps"],
                                     batch_size=settings["batch_size"],
                                     learning_rate=settings["learning_rate"],
                                     mask_rate=settings["mask_rate"], progress=progress,
                                     config_fingerprint=config.fingerprint)
    workspace = Workspace(config.output_dir)
    base.save(workspace.base_path)
    report.save(workspace.base_path.parent / "report.json")
    return workspace.base_path


def cmd_train_source(config, *, tasks=None, order=None, preset=None, name=None, seed=None,
                     progress=None):
    """
    Source task training. Task ids come from --tasks, a preset or
    source.tasks of the config; --order switches to the fixed visit
    policy and is recorded in the report. Saves the collapsed prefix.
    """
    if preset is not None and preset not in SOURCE_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of "
                          f"{sorted(SOURCE_PRESETS)}")
    task_ids = (parse_order(tasks) if tasks else SOURCE_PRESETS[preset] if preset
                else list(config["source"]["tasks"]))
    plan = config.source_plan()
    if order:
        order = parse_order(order)
        if sorted(order) != sorted(task_ids):
            raise ConfigError(f"--order {order} is not a permutation of {task_ids}")
        plan = replace(plan, visit_policy="fixed", order=tuple(order))

    vocab, corpora = load_data(config)
    base = read_base(config)
    model_config = config.model_config(vocab_size=len(vocab))
    seed = run_seed(config, seed)
    prefix = PrefixBank.initialize(model_config, seed,
                                   reparameterize=config["prefix"]["reparameterize"])
    prefix, report = train_source(pick_corpora(corpora, task_ids), plan, prefix, base, seed,
                                  progress=progress, config_fingerprint=config.fingerprint)
    collapse_prefix_encoder(prefix)
    prefix.provenance = "source-trained"
    report.extra["order"] = list(order) if order else None

    directory = Workspace(config.output_dir).source_dir(name or preset or "default")
    meta = {"config_fingerprint": config.fingerprint, "tasks": task_ids, "seed": seed}
    path = save_prefix(prefix, directory / "prefix.json", meta=meta)
    report.save(directory / "report.json")
    (directory / "losses.csv").write_text(loss_trace_csv({"source": report}),
                                          encoding="utf-8")
    return path


def cmd_specify_target(config, *, prefix_path=None, random_prefix=False, rate=None,
                       task=None, name=None, seed=None, progress=None):
    """
    Target task specification with a transferred prefix (--prefix) or
    a freshly initialized one (--random-prefix), optionally on a
    subsample of the train split (--rate). Returns the report path.
    """
    if bool(prefix_path) == bool(random_prefix):
        raise ConfigError("pass exactly one of --prefix PATH or --random-prefix")
    vocab, corpora = load_data(config)
    target = target_corpus(config, corpora, task)
    fresh = read_base(config)
    model_config = config.model_config(vocab_size=len(vocab))
    seed = run_seed(config, seed)
    plan = config.target_plan()

    if random_prefix:
        prefix = PrefixBank.initialize(model_config, seed,
                                       reparameterize=config["prefix"]["reparameterize"])
        tags = ("ablation-random",)
    else:
        prefix, _ = load_prefix(prefix_path)
        tags = ("transfer",)
    common = dict(plan=plan, seed=seed, vocab=vocab, config=model_config, progress=progress,
                  config_fingerprint=config.fingerprint)
    if rate is not None:
        outcome = low_resource_outcome(target, rate, prefix, fresh, tags=tags, **common)
    else:
        outcome = specify_target(target, prefix, fresh, tags=tags, **common)

    directory = Workspace(config.output_dir).target_dir(
        name or f"{target[0].task_id}-{'random' if random_prefix else 'transfer'}")
    meta = {"config_fingerprint": config.fingerprint, "task_id": target[0].task_id,
            "seed": seed, "best_epoch": outcome.best_epoch}
    snapshot(outcome.backbone, provenance="target-tuned", meta=meta).save(
        directory / "backbone.json")
    save_prefix(outcome.prefix, directory / "prefix.json", meta=meta)
    return outcome.report.save(directory / "report.json")


def cmd_evaluate(config, *, backbone_path, prefix_path=None, task=None, split="test"):
    """ Scores a saved backbone (and prefix) on one split of a task. """
    vocab, corpora = load_data(config)
    task, corpus = target_corpus(config, corpora, task)
    saved = BackboneSnapshot.read(backbone_path)
    prefix = load_prefix(prefix_path)[0] if prefix_path else None
    model_config = prefix.config if prefix is not None else saved.config
    backbone = load(saved, model_config)
    result = evaluate(backbone, prefix, corpus, task.kind, vocab=vocab, split=split)
    print(format_table(["Task", "Split", "Metric", "Value", "Examples"],
                       [[result.task_id, split, result.metric, result.value,
                         result.n_examples]]), end="")
    return result


# -------------------
#  VERIFY
# -------------------
def _verify_checkpoint(path, fingerprint, problems):
    stored, recomputed = read_digest(path)
    if stored != recomputed:
        problems.append(f"{path}: tensor digest {stored} != recomputed {recomputed}")
    with open(path, encoding="utf-8") as file:
        meta = json.loads(file.read()).get("meta", {})
    if meta.get("config_fingerprint") not in (None, fingerprint):
        problems.append(f"{path}: config fingerprint {meta['config_fingerprint']} "
                        f"!= active {fingerprint}")


def _verify_corpus(directory, vocab, fingerprint, problems):
    with open(directory / "manifest.json", encoding="utf-8") as file:
        manifest = json.loads(file.read())
    for split, size in manifest["sizes"].items():
        split_path = directory / f"{split}.jsonl"
        lines = (len(split_path.read_text(encoding="utf-8").splitlines())
                 if split_path.exists() else 0)
        if lines != size:
            problems.append(f"{split_path}: {lines} lines, manifest says {size}")
    if manifest.get("vocab_checksum") != vocab.checksum():
        problems.append(f"{directory}: vocabulary checksum does not match vocab.json")
    if manifest.get("config_fingerprint") != fingerprint:
        problems.append(f"{directory}: config fingerprint "
                        f"{manifest.get('config_fingerprint')} != active {fingerprint}")


def cmd_verify(config):
    """
    Recomputes checkpoint digests, corpus line counts and compares the
    embedded config fingerprints with the active configuration.
    """
    workspace = Workspace(config.output_dir)
    fingerprint = config.fingerprint
    problems, checked = [], 0
    if workspace.vocab_path.exists():
        vocab = Vocab.read(workspace.vocab_path)
        for manifest_path in sorted(workspace.data_dir.glob("*/manifest.json")):
            _verify_corpus(manifest_path.parent, vocab, fingerprint, problems)
            checked += 1
    for path in sorted(workspace.root.glob("**/*.json")):
        if path.name in ("backbone.json", "prefix.json"):
            _verify_checkpoint(path, fingerprint, problems)
            checked += 1
        elif path.name == "report.json":
            checked += 1
            try:
                report = TrainReport.read(path)
            except StateError as e:
                problems.append(f"{path}: {e}")
                continue
            if report.config_fingerprint != fingerprint:
                problems.append(f"{path}: config fingerprint {report.config_fingerprint} "
                                f"!= active {fingerprint}")
    for problem in problems:
        logger.error(problem)
    if problems:
        raise DataError(f"verification found {len(problems)} problem(s) "
                        f"in {checked} artifacts")
    logger.info("Verified %d artifacts under %s", checked, workspace.root)
    return checked
