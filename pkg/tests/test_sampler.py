import math

import numpy as np
import pytest

from modules.errors import ConfigError
from modules.sampler import SamplerState, apportion, plan_epoch, sampling_distribution


def test_equal_sizes_are_uniform():
    np.testing.assert_allclose(sampling_distribution([500, 500], 1.0), [0.5, 0.5])
    assert sampling_distribution([7], 1.0).tolist() == [1.0]


def test_two_language_sizes():
    go, ruby = math.log(167288) + 1.0, math.log(24927) + 1.0
    expected = [go / (go + ruby), ruby / (go + ruby)]
    probabilities = sampling_distribution([167288, 24927], 1.0)
    np.testing.assert_allclose(probabilities, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(probabilities, [0.539, 0.461], atol=1e-3)


def test_small_tasks_are_over_sampled():
    rng = np.random.default_rng(0)
    for _ in range(100):
        sizes = rng.integers(1, 1_000_000, size=int(rng.integers(2, 6)))
        if len(set(sizes.tolist())) == 1:
            continue
        probabilities = sampling_distribution(sizes, 1.0)
        shares = sizes / sizes.sum()
        smallest, largest = int(np.argmin(sizes)), int(np.argmax(sizes))
        assert probabilities[smallest] >= shares[smallest]
        assert probabilities[largest] <= shares[largest]
        assert probabilities.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("sizes, delta", [([10, 0], 1.0), ([10, 10], 0.0),
                                          ([10, 10], -1.0), ([], 1.0)])
def test_invalid_sampling_inputs(sizes, delta):
    with pytest.raises(ConfigError):
        sampling_distribution(sizes, delta)


def test_apportion():
    assert apportion([0.5, 0.5], 10) == [5, 5]
    assert apportion([1.0], 7) == [7]
    assert apportion(sampling_distribution([167288, 24927], 1.0), 100) == [54, 46]
    assert apportion([0.98, 0.01, 0.01], 3) == [1, 1, 1]
    with pytest.raises(ConfigError):
        apportion([0.5, 0.5], 1)


def test_draw_frequencies_follow_the_distribution():
    sampler = SamplerState.build(["a", "b", "c"], [10, 1000, 100000], 1.0,
                                 np.random.default_rng(3))
    draws = sampler.draw(100_000)
    frequencies = np.bincount(draws, minlength=3) / draws.size
    np.testing.assert_allclose(frequencies, sampler.probabilities, atol=0.01)


def test_visit_policies():
    def fresh():
        return SamplerState.build(["a", "b", "c"], [100, 200, 300], 1.0,
                                  np.random.default_rng(0))

    fixed = plan_epoch(fresh(), 12, policy="fixed", order=["c", "a", "b"])
    assert [task for task, _ in fixed] == ["c", "a", "b"]
    assert sum(count for _, count in fixed) == 12
    for policy in ("shuffled", "weighted"):
        plan = plan_epoch(fresh(), 12, policy=policy)
        assert sorted(task for task, _ in plan) == ["a", "b", "c"]
        assert plan == plan_epoch(fresh(), 12, policy=policy)
    with pytest.raises(ConfigError):
        plan_epoch(fresh(), 12, policy="fixed", order=["a", "a", "b"])
    with pytest.raises(ConfigError):
        plan_epoch(fresh(), 12, policy="round-robin")
