# ---------------------------------------------------
# trainer.py - Source Training and Target Specification
# ---------------------------------------------------
# A module that contains the two training stages of
# the knowledge prefix and the experiments built on
# them. Source training visits every source task once
# per epoch, reloading a fresh backbone from the base
# snapshot at each task switch while one prefix bank
# keeps learning across all of them. Target
# specification concatenates that prefix to a fresh
# backbone and tunes the whole model on the target.
# The random-prefix ablation, low-resource runs, the
# task-order experiment and the denoising pass that
# produces the base backbone live here as well.
# ---------------------------------------------------

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from modules import autodiff as ad
from modules.checkpoint import load, snapshot
from modules.errors import (CompatibilityError, ConfigError, DataError, NumericAbort,
                            NumericError)
from modules.metrics import evaluate, metric_for, padded
from modules.model import (PrefixBank, check_compatible, collapse_prefix_encoder, init_backbone,
                           sequence_loss)
from modules.optim import Adam
from modules.reports import TrainReport
from modules.sampler import VISIT_POLICIES, SamplerState, plan_epoch
from modules.seeding import fingerprint, stream
from modules.tasks import BOS_ID, EOS_ID, PAD_ID, UNK_ID, subsample

logger = logging.getLogger(__name__)

LOW_RESOURCE_RATES = (0.05, 0.1, 0.2)
SOURCE_EPOCHS_BY_KIND = {"summarization": 2, "classification": 6, "translation": 6}


# -------------------
#  PLANS
# -------------------
@dataclass(frozen=True)
class SourceTrainPlan:
    epochs: int = 2
    batches_per_epoch: int = 48
    batch_size: int = 16
    learning_rate: float = 5e-4
    delta: float = 1.0
    visit_policy: str = "shuffled"
    order: tuple = None
    base_reference: str = "base-pretrained"

    def validate(self, n_tasks):
        """ Raises ConfigError unless the plan can cover n_tasks tasks. """
        if n_tasks < 1:
            raise ConfigError("source training needs at least one task")
        if self.epochs < 1:
            raise ConfigError(f"source epochs must be >= 1, got {self.epochs}")
        if self.batches_per_epoch < n_tasks:
            raise ConfigError(f"batches_per_epoch={self.batches_per_epoch} cannot give "
                              f"each of the {n_tasks} tasks a batch")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.visit_policy not in VISIT_POLICIES:
            raise ConfigError(f"unknown visit policy {self.visit_policy!r}")
        if self.order is not None and self.visit_policy != "fixed":
            raise ConfigError("an explicit order needs the 'fixed' visit policy")
        return self

    def to_dict(self):
        document = asdict(self)
        document["order"] = list(self.order) if self.order is not None else None
        return document


@dataclass(frozen=True)
class TargetPlan:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    eval_limit: int = None

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"target epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class TargetOutcome:
    backbone: object
    prefix: object
    report: TrainReport
    best_epoch: int
    best_metric: float


@dataclass
class OrderTable:
    metric: str
    seeds: list
    rows: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)

    @property
    def means(self):
        return [float(np.mean(values)) for _, values in self.rows]

    @property
    def spread(self):
        means = self.means
        return max(means) - min(means)

    @property
    def seed_std(self):
        """ Across-seed standard deviation of the first order. """
        values = self.rows[0][1]
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    @property
    def within_bound(self):
        return self.spread < self.seed_std

    def to_dict(self):
        return {"metric": self.metric, "seeds": list(self.seeds),
                "rows": [{"order": label, "values": list(values),
                          "mean": float(np.mean(values))} for label, values in self.rows],
                "spread": self.spread, "seed_std": self.seed_std,
                "within_bound": self.within_bound}


# -------------------
#  HELPERS
# -------------------
def collate(examples):
    """ Padded (source, target) id arrays of a list of encoded examples. """
    return (padded([e.source_tokens for e in examples]),
            padded([e.target_tokens for e in examples]))


def draw_batch(rng, examples, batch_size):
    """ Uniform draw without replacement (with it when the split is small). """
    count = len(examples)
    picks = rng.choice(count, size=batch_size, replace=count < batch_size)
    return [examples[int(i)] for i in picks]


def dev_loss(backbone, prefix, examples, *, batch_size=32):
    """ Mean teacher-forced loss over examples, without dropout. """
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            source, target = collate(chunk)
            loss = sequence_loss(backbone, prefix, source, target)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / count


def _check_shared_vocab(corpora):
    checksums = {corpus.vocab_checksum for corpus in corpora}
    if None in checksums:
        raise ConfigError("every corpus must be encoded before training")
    if len(checksums) != 1:
        raise ConfigError(f"corpora were encoded with different vocabularies: "
                          f"{sorted(checksums)}")
    return checksums.pop()


def _train_step(backbone, prefix, optimizers, batch, dropout_rng):
    source, target = collate(batch)
    loss = sequence_loss(backbone, prefix, source, target, rng=dropout_rng)
    ad.backward(loss)
    for optimizer in optimizers:
        optimizer.step()
        optimizer.zero_grad()
    return loss.item()


def _abort(error, report, where):
    ad.GradientTape.discard()
    logger.error("Training aborted during %s: %s", where, error)
    return NumericAbort(f"non-finite value during {where}: {error}", report=report)


def _tick(progress, *, left, center="", right="", value):
    if progress is not None:
        progress(left=left, center=center, right=right, value=value)


# -------------------
#  SOURCE TRAINING
# -------------------
def train_source(tasks, plan, prefix, base, seed, *, progress=None, probe=None,
                 config_fingerprint=None):
    """
    Continual source-task training. tasks is a list of (TaskSpec,
    Corpus) pairs sharing one vocabulary. Every epoch apportions the
    batch budget over tasks with the smoothed log-proportional
    distribution and visits each task once; each visit starts from a
    fresh backbone loaded from base and takes one Adam step per batch
    on both the prefix and that backbone. Only the prefix survives.
    probe(task_id=, epoch=, backbone=) is called right after each
    switch. Returns (prefix, report).
    """
    plan.validate(len(tasks))
    task_ids = [task.task_id for task, _ in tasks]
    if len(set(task_ids)) != len(task_ids):
        raise ConfigError(f"duplicate source tasks in {task_ids}")
    corpora = dict((task.task_id, corpus) for task, corpus in tasks)
    _check_shared_vocab(corpora.values())

    sampler = SamplerState.build(task_ids, [len(corpora[t].train) for t in task_ids],
                                 plan.delta, stream(seed, "sampler"))
    batch_rng = stream(seed, "source-batches")
    dropout_rng = stream(seed, "dropout")
    prefix_optimizer = Adam(prefix.parameters(), lr=plan.learning_rate)
    base_digest = base.digest()

    if config_fingerprint is None:
        config_fingerprint = fingerprint({"stage": "source", "plan": plan.to_dict(),
                                          "model": prefix.config.to_dict(),
                                          "tasks": task_ids, "base": base_digest})
    report = TrainReport(config_fingerprint=config_fingerprint,
                         seeds={"run": seed, "prefix": prefix.seed, "base": base.seed},
                         tags=["source"])
    report.extra.update({"plan": plan.to_dict(), "tasks": task_ids, "visits": [],
                         "switches": [], "prefix_reparameterized": prefix.reparameterized,
                         "sampling": dict(zip(task_ids, map(float, sampler.probabilities)))})

    total_steps = plan.epochs * plan.batches_per_epoch
    started = time.perf_counter()
    logger.info("Source training over %s: %d epochs of %d batches",
                ", ".join(task_ids), plan.epochs, plan.batches_per_epoch)

    for epoch in range(1, plan.epochs + 1):
        visits = plan_epoch(sampler, plan.batches_per_epoch, policy=plan.visit_policy,
                            order=plan.order)
        report.extra["visits"].append([[task_id, n] for task_id, n in visits])
        for task_id, n_batches in visits:
            corpus = corpora[task_id]
            backbone = load(base, prefix.config)
            digest = backbone.digest()
            report.extra["switches"].append({"epoch": epoch, "task_id": task_id,
                                             "digest": digest,
                                             "fresh": digest == base_digest})
            if probe is not None:
                probe(task_id=task_id, epoch=epoch, backbone=backbone)
            optimizers = [prefix_optimizer, Adam(backbone.parameters(),
                                                 lr=plan.learning_rate)]
            for _ in range(n_batches):
                batch = draw_batch(batch_rng, corpus.train, plan.batch_size)
                try:
                    loss = _train_step(backbone, prefix, optimizers, batch, dropout_rng)
                    record = report.add_step(epoch=epoch, task_id=task_id, loss=loss)
                except NumericError as e:
                    raise _abort(e, report, f"source task {task_id}") from e
                _tick(progress, left=f"Source epoch {epoch}/{plan.epochs}",
                      center=task_id, right=f"loss {loss:.4f}",
                      value=record.step / total_steps)
            if corpus.dev:
                value = dev_loss(backbone, prefix, corpus.dev, batch_size=plan.batch_size)
                report.add_metric(epoch=epoch, task_id=task_id, metric_name="dev_loss",
                                  value=value)
                logger.info("Epoch %d %s: dev loss %.4f", epoch, task_id, value)

    report.wall_time = time.perf_counter() - started
    report.extra["prefix_digest"] = prefix.digest()
    logger.info("Source training finished in %.1fs (%d steps)", report.wall_time,
                len(report.steps))
    return prefix, report


# -------------------
#  TARGET SPECIFICATION
# -------------------
def _snapshot_arrays(params):
    return [p.data.copy() for p in params]


def _restore_arrays(params, arrays):
    for param, array in zip(params, arrays):
        param.data[...] = array


def specify_target(target, prefix, fresh, *, plan, seed, vocab, config=None,
                   progress=None, tags=(), config_fingerprint=None):
    """
    Concatenates the prefix to a fresh backbone and tunes both on the
    target train split. prefix may be None for plain fine-tuning. The
    caller's prefix is never modified; the tuned copy is returned in
    the outcome. After every epoch the dev loss and the task metric
    are recorded; the state with the best dev metric (earliest on ties)
    is restored at the end and scored on the test split.
    """
    plan.validate()
    task, corpus = target
    config = config or (prefix.config if prefix is not None else fresh.config)
    if corpus.vocab_checksum != vocab.checksum():
        raise ConfigError(f"{task.task_id} was not encoded with the active vocabulary")

    provenance = "none"
    if prefix is not None:
        prefix = copy.deepcopy(prefix)
        provenance = prefix.provenance
        collapse_prefix_encoder(prefix)
        check_compatible(prefix, config)
        if prefix.length != config.prefix_length:
            raise CompatibilityError(f"prefix length L={prefix.length} does not match "
                                     f"configured prefix_length={config.prefix_length}")

    backbone = load(fresh, config)
    params = backbone.parameters()
    optimizers = [Adam(params, lr=plan.learning_rate)]
    if prefix is not None:
        params = params + prefix.parameters()
        optimizers.append(Adam(prefix.parameters(), lr=plan.learning_rate))
    batch_rng = stream(seed, "target-batches")
    dropout_rng = stream(seed, "dropout")
    metric = metric_for(task.kind)

    if config_fingerprint is None:
        config_fingerprint = fingerprint({"stage": "target", "plan": plan.to_dict(),
                                          "model": config.to_dict(), "task": task.to_dict(),
                                          "train_size": len(corpus.train),
                                          "fresh": fresh.digest()})
    report = TrainReport(config_fingerprint=config_fingerprint,
                         seeds={"run": seed,
                                "prefix": prefix.seed if prefix is not None else None,
                                "base": fresh.seed},
                         tags=["target", *tags])
    report.extra.update({"plan": plan.to_dict(), "task_id": task.task_id,
                         "n_train": len(corpus.train), "prefix_provenance": provenance,
                         "prefix_length": prefix.length if prefix is not None else 0})

    train = list(corpus.train)
    batches_per_epoch = math.ceil(len(train) / plan.batch_size)
    total_steps = plan.epochs * batches_per_epoch
    best_epoch, best_metric, best_state = None, None, None
    started = time.perf_counter()

    for epoch in range(1, plan.epochs + 1):
        order = batch_rng.permutation(len(train))
        for start in range(0, len(train), plan.batch_size):
            batch = [train[int(i)] for i in order[start:start + plan.batch_size]]
            try:
                loss = _train_step(backbone, prefix, optimizers, batch, dropout_rng)
                record = report.add_step(epoch=epoch, task_id=task.task_id, loss=loss)
            except NumericError as e:
                raise _abort(e, report, f"target task {task.task_id}") from e
            _tick(progress, left=f"Target epoch {epoch}/{plan.epochs}",
                  center=task.task_id, right=f"loss {loss:.4f}",
                  value=record.step / total_steps)
        if not corpus.dev:
            best_epoch, best_state = epoch, None
            continue
        dev = list(corpus.dev)[:plan.eval_limit] if plan.eval_limit else list(corpus.dev)
        report.add_metric(epoch=epoch, task_id=task.task_id, metric_name="dev_loss",
                          value=dev_loss(backbone, prefix, dev, batch_size=plan.batch_size))
        result = evaluate(backbone, prefix, corpus, task.kind, vocab=vocab, split="dev",
                          limit=plan.eval_limit)
        report.add_metric(epoch=epoch, task_id=task.task_id, metric_name=metric,
                          value=result.value)
        logger.info("Epoch %d %s: dev %s %.4f", epoch, task.task_id, metric, result.value)
        if best_metric is None or result.value > best_metric:
            best_epoch, best_metric = epoch, result.value
            best_state = _snapshot_arrays(params)

    if best_state is not None:
        _restore_arrays(params, best_state)
    report.extra.update({"best_epoch": best_epoch, "best_dev": best_metric})
    if corpus.test:
        report.add_evaluation(evaluate(backbone, prefix, corpus, task.kind, vocab=vocab,
                                       split="test"))
    report.wall_time = time.perf_counter() - started
    backbone.provenance = "target-tuned"
    logger.info("Target %s finished in %.1fs, best epoch %s", task.task_id,
                report.wall_time, best_epoch)
    return TargetOutcome(backbone=backbone, prefix=prefix, report=report,
                         best_epoch=best_epoch, best_metric=best_metric)


def final_metric(report):
    """ Test metric when one was recorded, else the best dev metric. """
    if report.evaluations:
        return float(report.evaluations[-1]["value"])
    best = report.extra.get("best_dev")
    if best is None:
        raise DataError(f"target {report.extra.get('task_id')!r} has neither a dev nor "
                        f"a test split to score")
    return float(best)


def dev_metric(report):
    """ Best dev metric when one was recorded, else the test metric. """
    best = report.extra.get("best_dev")
    return float(best) if best is not None else final_metric(report)


def ablate_random_prefix(target, fresh, config, seed, *, plan, vocab, reparameterize=False,
                         progress=None, config_fingerprint=None):
    """ specify_target with a freshly initialized prefix; tagged 'ablation-random'. """
    prefix = PrefixBank.initialize(config, seed, reparameterize=reparameterize)
    outcome = specify_target(target, prefix, fresh, plan=plan, seed=seed, vocab=vocab,
                             config=config, progress=progress, tags=("ablation-random",),
                             config_fingerprint=config_fingerprint)
    return outcome.report


def low_resource_outcome(target, rate, prefix, fresh, *, config, seed, plan, vocab,
                         progress=None, tags=(), config_fingerprint=None):
    """ Subsamples the target train split at rate, then specifies the target. """
    if not any(math.isclose(rate, allowed) for allowed in LOW_RESOURCE_RATES):
        logger.warning("Low-resource rate %.3f is outside the studied rates %s",
                       rate, LOW_RESOURCE_RATES)
    task, corpus = target
    reduced = subsample(corpus, rate, seed)
    outcome = specify_target((task, reduced), prefix, fresh, plan=plan, seed=seed,
                             vocab=vocab, config=config, progress=progress,
                             tags=(*tags, "low-resource"),
                             config_fingerprint=config_fingerprint)
    outcome.report.extra["rate"] = rate
    outcome.report.extra["n_train"] = len(reduced.train)
    return outcome


def low_resource_run(target, rate, prefix, fresh, config, seed, *, plan, vocab,
                     progress=None, tags=(), config_fingerprint=None):
    """ Report of a low-resource target run; the report records the rate. """
    return low_resource_outcome(target, rate, prefix, fresh, config=config, seed=seed,
                                plan=plan, vocab=vocab, progress=progress, tags=tags,
                                config_fingerprint=config_fingerprint).report


# -------------------
#  TASK ORDER
# -------------------
def order_label(order):
    return ",".join(order)


def order_experiment(tasks, orders, plan, base, seeds, *, target, target_plan, config,
                     vocab, reparameterize=False, progress=None, config_fingerprint=None):
    """
    Runs source training once per (order, seed) with the fixed visit
    policy, then specifies the held-out target with each resulting
    prefix. The table holds the best dev metric per order and seed.
    """
    task_ids = [task.task_id for task, _ in tasks]
    if len(orders) < 2:
        raise ConfigError("the order experiment needs at least two orders")
    labels = []
    for order in orders:
        if sorted(order) != sorted(task_ids) or len(set(order)) != len(order):
            raise ConfigError(f"order {list(order)} is not a permutation of {task_ids}")
        label = order_label(order)
        if label in labels:
            logger.warning("Order %s is listed more than once", label)
        labels.append(label)

    table = OrderTable(metric=metric_for(target[0].kind), seeds=list(seeds))
    for order, label in zip(orders, labels):
        fixed = SourceTrainPlan(**{**asdict(plan), "visit_policy": "fixed",
                                   "order": tuple(order)})
        values = []
        for seed in seeds:
            prefix = PrefixBank.initialize(config, seed, reparameterize=reparameterize)
            prefix, source_report = train_source(tasks, fixed, prefix, base, seed,
                                                 progress=progress,
                                                 config_fingerprint=config_fingerprint)
            outcome = specify_target(target, prefix, base, plan=target_plan, seed=seed,
                                     vocab=vocab, config=config, progress=progress,
                                     tags=(f"order:{label}",),
                                     config_fingerprint=config_fingerprint)
            table.reports[f"{label}/seed-{seed}/source"] = source_report
            table.reports[f"{label}/seed-{seed}/target"] = outcome.report
            values.append(dev_metric(outcome.report))
        table.rows.append((label, values))
        logger.info("Order %s: %s", label, ", ".join(f"{v:.4f}" for v in values))

    if not table.within_bound:
        logger.warning("Order spread %.4f is not below the across-seed std %.4f",
                       table.spread, table.seed_std)
    return table


# -------------------
#  BASE PRETRAINING
# -------------------
def denoising_texts(corpora, config):
    """ Unique program token sequences of every train split, in corpus order. """
    seen, texts = set(), []
    for corpus in corpora:
        programs = [e.source_tokens for e in corpus.train]
        if corpus.task.kind == "translation":
            programs += [e.target_tokens[1:-1] for e in corpus.train]
        for tokens in programs:
            tokens = tuple(tokens)
            fits = (len(tokens) <= config.max_source_len
                    and len(tokens) + 1 <= config.max_target_len)
            if tokens and fits and tokens not in seen:
                seen.add(tokens)
                texts.append(tokens)
    if not texts:
        raise DataError("no program texts available for denoising")
    return texts


def pretrain_backbone(config, corpora, seed, *, steps, batch_size=16, learning_rate=1e-3,
                      mask_rate=0.15, progress=None, config_fingerprint=None):
    """
    Short denoising pass standing in for code pre-training: a share
    of mask_rate source tokens is replaced by UNK and the backbone
    reconstructs the original program. Returns (snapshot, report).
    """
    if steps < 1:
        raise ConfigError(f"pretraining needs at least one step, got {steps}")
    if not 0 < mask_rate < 1:
        raise ConfigError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    _check_shared_vocab(corpora)
    texts = denoising_texts(corpora, config)
    backbone = init_backbone(config, seed)
    optimizer = Adam(backbone.parameters(), lr=learning_rate)
    rng = stream(seed, "pretrain")
    dropout_rng = stream(seed, "dropout")

    if config_fingerprint is None:
        config_fingerprint = fingerprint({"stage": "pretrain", "model": config.to_dict(),
                                          "steps": steps, "batch_size": batch_size,
                                          "learning_rate": learning_rate,
                                          "mask_rate": mask_rate, "n_texts": len(texts)})
    report = TrainReport(config_fingerprint=config_fingerprint, seeds={"run": seed},
                         tags=["pretrain"])
    started = time.perf_counter()
    for step in range(1, steps + 1):
        batch = [texts[int(i)] for i in rng.choice(len(texts), size=batch_size,
                                                    replace=len(texts) < batch_size)]
        clean = padded(batch)
        noise = (rng.random(clean.shape) < mask_rate) & (clean != PAD_ID)
        corrupted = np.where(noise, UNK_ID, clean)
        target = padded([(BOS_ID, *tokens, EOS_ID) for tokens in batch])
        try:
            loss = sequence_loss(backbone, None, corrupted, target, rng=dropout_rng)
            ad.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            report.add_step(epoch=1, task_id="denoise", loss=loss.item())
        except NumericError as e:
            raise _abort(e, report, "pretraining") from e
        _tick(progress, left="Pretraining", center="denoise",
              right=f"loss {loss.item():.4f}", value=step / steps)

    report.wall_time = time.perf_counter() - started
    meta = {"steps": steps, "mask_rate": mask_rate, "n_texts": len(texts),
            "config_fingerprint": report.config_fingerprint}
    base = snapshot(backbone, provenance="base-pretrained", meta=meta)
    logger.info("Pretrained base backbone in %.1fs, final loss %.4f", report.wall_time,
                report.losses[-1])
    return base, report
