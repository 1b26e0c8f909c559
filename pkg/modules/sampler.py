# ---------------------------------------------------
# sampler.py - Adaptive Source Data Sampling
# ---------------------------------------------------
# Smoothed log-proportional task probabilities
#
#     P(k) = (ln|D(k)| + delta) / sum_j (ln|D(j)| + delta)
#
# which over-sample small source datasets and under-
# sample large ones, plus the per-epoch apportionment
# of a batch budget over tasks and their visit order.
# ---------------------------------------------------

import logging
import math
from dataclasses import dataclass

import numpy as np

from modules.errors import ConfigError

logger = logging.getLogger(__name__)

VISIT_POLICIES = ("shuffled", "fixed", "weighted")


def sampling_distribution(sizes, delta):
    """ Probability vector over tasks from their dataset sizes. """
    if delta is None or not delta > 0:
        raise ConfigError(f"smoothing factor delta must be > 0, got {delta}")
    sizes = list(sizes)
    if not sizes:
        raise ConfigError("sampling needs at least one task")
    if any(int(size) < 1 for size in sizes):
        raise ConfigError(f"every dataset size must be >= 1, got {sizes}")
    weights = np.array([math.log(int(size)) + delta for size in sizes], dtype=np.float64)
    return weights / weights.sum()


@dataclass
class SamplerState:
    task_ids: list
    sizes: list
    delta: float
    probabilities: np.ndarray
    rng: np.random.Generator

    @classmethod
    def build(cls, task_ids, sizes, delta, rng):
        if len(task_ids) != len(sizes):
            raise ConfigError("one dataset size is needed per task")
        probabilities = sampling_distribution(sizes, delta)
        logger.info("Source sampling distribution: %s", ", ".join(
            f"{task}={p:.4f}" for task, p in zip(task_ids, probabilities)))
        return cls(list(task_ids), [int(s) for s in sizes], float(delta),
                   probabilities, rng)

    def draw(self, count):
        """ Draws count task indices independently from P. """
        return self.rng.choice(len(self.task_ids), size=count, p=self.probabilities)


def apportion(probabilities, budget):
    """
    Largest-remainder split of budget by probabilities with a floor of
    one per entry. Ties on the remainder go to the lower index.
    """
    count = len(probabilities)
    if budget < count:
        raise ConfigError(f"batch budget {budget} is smaller than the "
                          f"{count} tasks it must cover")
    quotas = [budget * float(p) for p in probabilities]
    shares = [max(1, math.floor(q)) for q in quotas]
    remainders = [q - math.floor(q) for q in quotas]
    missing = budget - sum(shares)
    for index in sorted(range(count), key=lambda i: (-remainders[i], i)):
        if missing <= 0:
            break
        shares[index] += 1
        missing -= 1
    while missing < 0:
        # Floors raised to one overshoot; take back from the most over-served
        candidates = [i for i in range(count) if shares[i] > 1]
        index = max(candidates, key=lambda i: (shares[i] - quotas[i], -i))
        shares[index] -= 1
        missing += 1
    return shares


def plan_epoch(sampler, budget, *, policy="shuffled", order=None):
    """
    Returns [(task_id, n_batches)] for one epoch in visit order.
    'fixed' follows order (or registration order), 'shuffled' draws a
    uniform permutation and 'weighted' draws the order without
    replacement with probabilities P.
    """
    if policy not in VISIT_POLICIES:
        raise ConfigError(f"unknown visit policy {policy!r}, expected {VISIT_POLICIES}")
    shares = dict(zip(sampler.task_ids, apportion(sampler.probabilities, budget)))
    if policy == "fixed":
        visit = list(order) if order is not None else list(sampler.task_ids)
        if sorted(visit) != sorted(sampler.task_ids):
            raise ConfigError(f"order {visit} is not a permutation of {sampler.task_ids}")
    elif policy == "shuffled":
        visit = [sampler.task_ids[i] for i in sampler.rng.permutation(len(shares))]
    else:
        picks = sampler.rng.choice(len(shares), size=len(shares), replace=False,
                                   p=sampler.probabilities)
        visit = [sampler.task_ids[i] for i in picks]
    return [(task_id, shares[task_id]) for task_id in visit]
