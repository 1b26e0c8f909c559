# ---------------------------------------------------
# suites.py - Scripted Experiment Suites
# ---------------------------------------------------
# The five experiment presets run by `main.py suite`:
#   cross-task      other task kinds -> target task
#   cross-language  same kind in the other language
#   ablation        transferred vs random prefix
#   order           source task orders compared
#   low-resource    transfer vs random at 5-20% data
# Arms follow the <Source>2<Target> naming, e.g.
# SumCLS2CLS or Trans2Sum. Every suite writes its
# reports, a summary.json, a plain-text summary table
# and the CSV loss traces under suites/<name>/.
# ---------------------------------------------------

import json
import logging
from dataclasses import replace

import numpy as np

from controls.commands import (Workspace, load_data, pick_corpora, read_base,
                               target_corpus)
from modules.errors import ConfigError
from modules.model import PrefixBank, collapse_prefix_encoder
from modules.reports import format_table, language_table, loss_trace_csv, rows_csv
from modules.tasks import KINDS, other_language, task_id_for
from modules.trainer import (SOURCE_EPOCHS_BY_KIND, ablate_random_prefix, dev_metric,
                             final_metric, low_resource_run, order_experiment,
                             specify_target, train_source)

logger = logging.getLogger(__name__)

SUITES = ("cross-task", "cross-language", "ablation", "order", "low-resource")
KIND_ABBREVIATIONS = {"summarization": "Sum", "translation": "Trans",
                      "classification": "CLS"}
FINE_TUNE_ARM = "Fine-tune"

# Share of the random arm's steps within which the transfer arm must
# reach the random arm's final dev loss
CONVERGENCE_RATIO = 0.75


def arm_name(source_kinds, target_kind):
    """ ['summarization', 'classification'], 'classification' -> 'SumCLS2CLS'. """
    sources = "".join(KIND_ABBREVIATIONS[kind] for kind in source_kinds)
    return f"{sources}2{KIND_ABBREVIATIONS[target_kind]}"


class SuiteRunner:

    def __init__(self, config, *, seeds=None, progress=None):
        """
        Shared state of one suite invocation: the corpora, the base
        snapshot and the seeds. Source prefixes are cached per
        (tasks, seed) so arms that share a source stage train it once.
        """
        self.config = config
        self.seeds = list(seeds) if seeds else config.seeds
        self.progress = progress
        self.vocab, self.corpora = load_data(config)
        self.base = read_base(config)
        self.model_config = config.model_config(vocab_size=len(self.vocab))
        self.target_plan = config.target_plan()
        self.reports = {}
        self._prefixes = {}

    def source_plan(self, target_kind):
        plan = self.config.source_plan()
        if self.config["suites"]["kind_epochs"]:
            plan = replace(plan, epochs=SOURCE_EPOCHS_BY_KIND[target_kind])
        return plan

    def source_prefix(self, task_ids, seed, target_kind):
        key = (tuple(task_ids), seed, target_kind)
        if key not in self._prefixes:
            prefix = PrefixBank.initialize(self.model_config, seed,
                                           reparameterize=self.config["prefix"]["reparameterize"])
            prefix, report = train_source(pick_corpora(self.corpora, task_ids),
                                          self.source_plan(target_kind), prefix, self.base,
                                          seed, progress=self.progress,
                                          config_fingerprint=self.config.fingerprint)
            collapse_prefix_encoder(prefix)
            prefix.provenance = "source-trained"
            self.reports[f"source/{'+'.join(task_ids)}/seed-{seed}"] = report
            self._prefixes[key] = prefix
        return self._prefixes[key]

    def target_run(self, arm, target, prefix, seed, *, tags=()):
        outcome = specify_target(target, prefix, self.base, plan=self.target_plan, seed=seed,
                                 vocab=self.vocab, config=self.model_config,
                                 progress=self.progress, tags=(arm, *tags),
                                 config_fingerprint=self.config.fingerprint)
        self.reports[f"{arm}/seed-{seed}"] = outcome.report
        return outcome.report

    def random_run(self, arm, target, seed):
        report = ablate_random_prefix(target, self.base, self.model_config, seed,
                                      plan=self.target_plan, vocab=self.vocab,
                                      reparameterize=self.config["prefix"]["reparameterize"],
                                      progress=self.progress,
                                      config_fingerprint=self.config.fingerprint)
        report.tags.append(arm)
        self.reports[f"{arm}/seed-{seed}"] = report
        return report

    def target(self, task_id=None):
        return target_corpus(self.config, self.corpora, task_id)


# -------------------
#  PAIRED COMPARISON
# -------------------
def paired_summary(transfer, random, seeds):
    """ Per-seed deltas (transfer - random), win count and mean delta. """
    deltas = [t - r for t, r in zip(transfer, random)]
    return {"seeds": list(seeds), "transfer": list(transfer), "random": list(random),
            "deltas": deltas, "wins": sum(1 for d in deltas if d > 0),
            "ties": sum(1 for d in deltas if d == 0),
            "mean_delta": float(np.mean(deltas)) if deltas else 0.0}


def steps_to_reach(report, threshold):
    """ Steps until the per-epoch dev loss first drops to threshold, or None. """
    steps_per_epoch = {}
    for record in report.steps:
        steps_per_epoch[record.epoch] = record.step
    for record in report.epochs:
        if record.metric_name == "dev_loss" and record.value <= threshold:
            return steps_per_epoch[record.epoch]
    return None


def convergence_check(transfer_report, random_report):
    """
    Ratio of the transfer arm's steps to reach the random arm's final
    dev loss over the random arm's total steps.
    """
    trace = random_report.metric_trace("dev_loss")
    if not trace:
        return None
    reached = steps_to_reach(transfer_report, trace[-1])
    if reached is None:
        return None
    return reached / len(random_report.steps)


def paired_rows(summary):
    return [[seed, t, r, d] for seed, t, r, d in
            zip(summary["seeds"], summary["transfer"], summary["random"], summary["deltas"])]


# -------------------
#  SUITES
# -------------------
def run_cross_task(runner):
    """ Other task kinds of the target language transferred to the target task. """
    task, corpus = runner.target()
    others = [kind for kind in KINDS if kind != task.kind]
    arms = {arm_name([kind], task.kind): [kind] for kind in others}
    arms[arm_name(others, task.kind)] = others
    results = {FINE_TUNE_ARM: []}
    for seed in runner.seeds:
        report = runner.target_run(FINE_TUNE_ARM, (task, corpus), None, seed)
        results[FINE_TUNE_ARM].append(final_metric(report))
    for arm, kinds in arms.items():
        task_ids = [task_id_for(task.source_language, kind) for kind in kinds]
        results[arm] = []
        for seed in runner.seeds:
            prefix = runner.source_prefix(task_ids, seed, task.kind)
            report = runner.target_run(arm, (task, corpus), prefix, seed)
            results[arm].append(final_metric(report))
    rows = [[arm, *values, float(np.mean(values))] for arm, values in results.items()]
    headers = ["Arm", *[f"seed {s}" for s in runner.seeds], "Mean"]
    table = format_table(headers, rows, title=f"Cross-task transfer to {task.task_id}")
    return {"target": task.task_id, "results": results}, table, rows_csv(headers, rows)


def run_cross_language(runner):
    """ Every language held out in turn; sources are the same kind elsewhere. """
    kind = runner.corpora[runner.config["target"]["task"]].task.kind
    languages = runner.config["data"]["languages"]
    results = {FINE_TUNE_ARM: {}, "Transfer": {}}
    for language in languages:
        target = runner.target(task_id_for(language, kind))
        sources = [task_id_for(other, kind) for other in languages if other != language]
        if not sources:
            sources = [task_id_for(other_language(language), kind)]
        tuned, transferred = [], []
        for seed in runner.seeds:
            report = runner.target_run(f"{FINE_TUNE_ARM}/{language}", target, None, seed)
            tuned.append(final_metric(report))
            prefix = runner.source_prefix(sources, seed, kind)
            report = runner.target_run(f"Transfer/{language}", target, prefix, seed)
            transferred.append(final_metric(report))
        results[FINE_TUNE_ARM][language] = float(np.mean(tuned))
        results["Transfer"][language] = float(np.mean(transferred))
    table = language_table(results, title=f"Cross-language {KIND_ABBREVIATIONS[kind]}")
    rows = [[arm, language, value] for arm, values in results.items()
            for language, value in values.items()]
    return {"kind": kind, "results": results}, table, rows_csv(["arm", "language", "value"],
                                                               rows)


def run_ablation(runner):
    """ Paired transferred vs random prefix on the configured target. """
    task, corpus = runner.target()
    source_ids = list(runner.config["source"]["tasks"])
    source_kinds = [runner.corpora[t].task.kind for t in source_ids]
    arm = arm_name(source_kinds, task.kind)
    transfer, random, ratios = [], [], []
    for seed in runner.seeds:
        prefix = runner.source_prefix(source_ids, seed, task.kind)
        transfer_report = runner.target_run(arm, (task, corpus), prefix, seed)
        random_report = runner.random_run("Random", (task, corpus), seed)
        transfer.append(dev_metric(transfer_report))
        random.append(dev_metric(random_report))
        ratios.append(convergence_check(transfer_report, random_report))
    summary = paired_summary(transfer, random, runner.seeds)
    summary["arm"] = arm
    summary["convergence_ratios"] = ratios
    summary["converged_faster"] = sum(1 for r in ratios
                                      if r is not None and r <= CONVERGENCE_RATIO)
    headers = ["Seed", arm, "Random", "Delta"]
    table = format_table(headers, paired_rows(summary),
                         title=f"Ablation on {task.task_id} (dev): {summary['wins']}/"
                               f"{len(runner.seeds)} wins, mean delta "
                               f"{summary['mean_delta']:.4f}")
    return summary, table, rows_csv(headers, paired_rows(summary))


def run_order(runner):
    """ Source task orders compared on the configured target. """
    task, corpus = runner.target()
    source_ids = list(runner.config["source"]["tasks"])
    orders = runner.config["suites"]["orders"] or [source_ids, list(reversed(source_ids))]
    table = order_experiment(pick_corpora(runner.corpora, source_ids), orders,
                             runner.source_plan(task.kind), runner.base, runner.seeds,
                             target=(task, corpus), target_plan=runner.target_plan,
                             config=runner.model_config, vocab=runner.vocab,
                             reparameterize=runner.config["prefix"]["reparameterize"],
                             progress=runner.progress,
                             config_fingerprint=runner.config.fingerprint)
    runner.reports.update(table.reports)
    summary = table.to_dict()
    headers = ["Order", *[f"seed {s}" for s in runner.seeds], "Mean"]
    rows = [[label, *values, float(np.mean(values))] for label, values in table.rows]
    text = format_table(headers, rows,
                        title=f"Task order on {task.task_id}: spread {table.spread:.4f}, "
                              f"seed std {table.seed_std:.4f}"
                              f"{'' if table.within_bound else ' (FLAGGED)'}")
    return summary, text, rows_csv(headers, rows)


def run_low_resource(runner):
    """ Transfer vs random prefix on a subsampled target, per rate. """
    task_id = runner.config["suites"]["low_resource_task"]
    task, corpus = runner.target(task_id)
    source_ids = list(runner.config["source"]["tasks"])
    summary, rows = {"target": task_id, "rates": {}}, []
    for rate in runner.config["suites"]["low_resource_rates"]:
        transfer, random = [], []
        for seed in runner.seeds:
            prefix = runner.source_prefix(source_ids, seed, task.kind)
            common = dict(plan=runner.target_plan, vocab=runner.vocab,
                          progress=runner.progress,
                          config_fingerprint=runner.config.fingerprint)
            report = low_resource_run((task, corpus), rate, prefix, runner.base,
                                      runner.model_config, seed, tags=("transfer",), **common)
            runner.reports[f"transfer/rate-{rate}/seed-{seed}"] = report
            transfer.append(final_metric(report))
            random_prefix = PrefixBank.initialize(
                runner.model_config, seed,
                reparameterize=runner.config["prefix"]["reparameterize"])
            report = low_resource_run((task, corpus), rate, random_prefix, runner.base,
                                      runner.model_config, seed, tags=("ablation-random",),
                                      **common)
            runner.reports[f"random/rate-{rate}/seed-{seed}"] = report
            random.append(final_metric(report))
        paired = paired_summary(transfer, random, runner.seeds)
        summary["rates"][str(rate)] = paired
        rows.append([rate, float(np.mean(transfer)), float(np.mean(random)),
                     paired["mean_delta"], f"{paired['wins']}/{len(runner.seeds)}"])
    headers = ["Rate", "Transfer", "Random", "Mean delta", "Wins"]
    table = format_table(headers, rows, title=f"Low-resource {task_id} (test)")
    return summary, table, rows_csv(headers, rows)


RUNNERS = {"cross-task": run_cross_task, "cross-language": run_cross_language,
           "ablation": run_ablation, "order": run_order, "low-resource": run_low_resource}


def cmd_suite(config, name, *, seeds=None, progress=None):
    """
    Runs one suite, writes its artifacts and prints the summary table.
    Returns the path of summary.json.
    """
    if name not in RUNNERS:
        raise ConfigError(f"unknown suite {name!r}, expected one of {SUITES}")
    runner = SuiteRunner(config, seeds=seeds, progress=progress)
    logger.info("Running suite %s over seeds %s", name, runner.seeds)
    summary, table, csv_rows = RUNNERS[name](runner)

    directory = Workspace(config.output_dir).suite_dir(name)
    directory.mkdir(parents=True, exist_ok=True)
    for key, report in runner.reports.items():
        report.save(directory / "runs" / key / "report.json")
    document = {"suite": name, "config_fingerprint": config.fingerprint,
                "seeds": runner.seeds, "summary": summary}
    path = directory / "summary.json"
    path.write_text(json.dumps(document, indent=1) + "\n", encoding="utf-8")
    (directory / "summary.txt").write_text(table, encoding="utf-8")
    (directory / "summary.csv").write_text(csv_rows, encoding="utf-8")
    (directory / "losses.csv").write_text(loss_trace_csv(runner.reports), encoding="utf-8")
    print(table, end="")
    return path
