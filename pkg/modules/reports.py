# ---------------------------------------------------
# reports.py - TrainReport and Result Tables
# ---------------------------------------------------
# A module that records what a training run did:
# every optimizer step with its loss, per-epoch dev
# metrics, evaluation rows, tags and the config
# fingerprint and seeds that produced it. Reports are
# written as JSON without timing so that equal seeds
# give equal bytes, and can be exported as CSV traces
# or rendered as plain-text summary tables.
# ---------------------------------------------------

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from modules.errors import NumericError, StateError

logger = logging.getLogger(__name__)


@dataclass
class StepRecord:
    epoch: int
    task_id: str
    step: int
    loss: float


@dataclass
class EpochRecord:
    epoch: int
    task_id: str
    metric_name: str
    value: float


@dataclass
class TrainReport:
    config_fingerprint: str
    seeds: dict
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    evaluations: list = field(default_factory=list)
    wall_time: float = 0.0

    def add_step(self, *, epoch, task_id, loss):
        """ Appends the next global step; losses must be finite. """
        loss = float(loss)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {len(self.steps) + 1}")
        step = self.steps[-1].step + 1 if self.steps else 1
        record = StepRecord(epoch=epoch, task_id=task_id, step=step, loss=loss)
        self.steps.append(record)
        return record

    def add_metric(self, *, epoch, task_id, metric_name, value):
        record = EpochRecord(epoch=epoch, task_id=task_id,
                             metric_name=metric_name, value=float(value))
        self.epochs.append(record)
        return record

    def add_evaluation(self, result):
        self.evaluations.append(result.to_dict())

    @property
    def losses(self):
        return [record.loss for record in self.steps]

    def metric_trace(self, metric_name, task_id=None):
        return [r.value for r in self.epochs
                if r.metric_name == metric_name and (task_id is None or r.task_id == task_id)]

    def check_order(self):
        for previous, current in zip(self.steps, self.steps[1:]):
            if current.step <= previous.step:
                raise StateError(f"report steps out of order at {current.step}")

    def to_dict(self, *, include_timing=False):
        document = {"config_fingerprint": self.config_fingerprint,
                    "seeds": dict(self.seeds),
                    "steps": [asdict(r) for r in self.steps],
                    "epochs": [asdict(r) for r in self.epochs],
                    "tags": list(self.tags),
                    "extra": self.extra,
                    "evaluations": list(self.evaluations)}
        if include_timing:
            document["wall_time"] = self.wall_time
        return document

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    @classmethod
    def from_dict(cls, document):
        report = cls(config_fingerprint=document["config_fingerprint"],
                     seeds=document["seeds"],
                     steps=[StepRecord(**r) for r in document["steps"]],
                     epochs=[EpochRecord(**r) for r in document["epochs"]],
                     tags=list(document.get("tags", [])),
                     extra=dict(document.get("extra", {})),
                     evaluations=list(document.get("evaluations", [])),
                     wall_time=float(document.get("wall_time", 0.0)))
        report.check_order()
        return report

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        logger.info("Saved report (%d steps, wall time %.1fs) to %s",
                    len(self.steps), self.wall_time, path)
        return path

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as file:
            return cls.from_dict(json.loads(file.read()))


# -------------------
#  EXPORTS
# -------------------
def loss_trace_csv(reports):
    """ CSV of every step of the given {arm_name: report} mapping. """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["arm", "epoch", "task_id", "step", "loss"])
    for arm, report in reports.items():
        for record in report.steps:
            writer.writerow([arm, record.epoch, record.task_id, record.step,
                             f"{record.loss:.6f}"])
    return buffer.getvalue()


def rows_csv(headers, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buffer.getvalue()


def format_table(headers, rows, *, title=None):
    """ Fixed-width plain-text table; floats shown with two decimals. """
    def cell(value):
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in body)) if body else len(str(h))
              for i, h in enumerate(headers)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(str(h).ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def language_table(results, *, title=None):
    """
    Per-language layout: one row per arm, one column per language and
    a final Overall column holding the mean. results maps
    arm -> {language: value}.
    """
    languages = sorted({language for row in results.values() for language in row})
    rows = []
    for arm, values in results.items():
        cells = [values.get(language, "-") for language in languages]
        present = [v for v in values.values() if isinstance(v, float)]
        overall = sum(present) / len(present) if present else "-"
        rows.append([arm, *cells, overall])
    return format_table(["Arm", *languages, "Overall"], rows, title=title)
