import numpy as np
import pytest

from modules import autodiff as ad
from modules.autodiff import DiffTensor
from modules.errors import ConfigError, InputError, NumericError, ShapeError, StateError

TOLERANCE = 1e-4


def leaf(rng, *shape, low=-1.0, high=1.0):
    return DiffTensor(rng.uniform(low, high, size=shape), requires_grad=True)


def check(fn, tensors, seed=0):
    return ad.finite_difference_check(fn, tensors, max_coordinates=10,
                                      rng=np.random.default_rng(seed))


def test_elementwise_and_matmul_gradients():
    rng = np.random.default_rng(1)
    with ad.check_mode():
        a, b, c = leaf(rng, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
        assert check(lambda: ad.total(ad.tanh(ad.add(ad.matmul(a, b), c))), [a, b, c]) < TOLERANCE
        x, w = leaf(rng, 2, 3, 4), leaf(rng, 4)
        assert check(lambda: ad.mean(ad.mul(x, w)), [x, w]) < TOLERANCE
        p, q = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
        assert check(lambda: ad.total(ad.scale(ad.matmul(p, q), 0.5)), [p, q]) < TOLERANCE


def test_relu_gradient_away_from_the_kink():
    rng = np.random.default_rng(2)
    with ad.check_mode():
        x = DiffTensor(rng.choice([-1.0, 1.0], size=(4, 4)) * rng.uniform(0.2, 1.0, (4, 4)),
                       requires_grad=True)
        assert check(lambda: ad.total(ad.mul_constant(ad.relu(x), np.arange(16.0).reshape(4, 4))),
                     [x]) < TOLERANCE


def test_shape_ops_gradients():
    rng = np.random.default_rng(3)
    with ad.check_mode():
        x, y = leaf(rng, 2, 3, 4), leaf(rng, 2, 1, 4)
        weights = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)

        def shaped():
            joined = ad.concat([y, x], axis=1)
            flipped = ad.transpose(ad.reshape(joined, (2, 4, 4)), (0, 2, 1))
            return ad.total(ad.mul_constant(flipped, weights))

        assert check(shaped, [x, y]) < TOLERANCE
        z = leaf(rng, 3, 2)
        sliced = lambda: ad.total(ad.tanh(ad.take(ad.repeat_batch(z, 2), (slice(None), slice(1, 3)))))
        assert check(sliced, [z]) < TOLERANCE


def test_softmax_layer_norm_and_cross_entropy_gradients():
    rng = np.random.default_rng(4)
    with ad.check_mode():
        x = leaf(rng, 3, 5)
        weights = rng.uniform(-1, 1, size=(3, 5))
        assert check(lambda: ad.total(ad.mul_constant(ad.softmax(x), weights)), [x]) < TOLERANCE
        gain, bias = leaf(rng, 5, low=0.5, high=1.5), leaf(rng, 5)
        normed = lambda: ad.total(ad.mul_constant(ad.layer_norm(x, gain, bias), weights))
        assert check(normed, [x, gain, bias]) < TOLERANCE
        logits = leaf(rng, 4, 6)
        targets = np.array([1, 0, 5, 2])
        assert check(lambda: ad.cross_entropy(logits, targets, 0), [logits]) < TOLERANCE


def test_embedding_gradient_accumulates_repeated_ids():
    rng = np.random.default_rng(5)
    with ad.check_mode():
        table = leaf(rng, 6, 3)
        ids = np.array([[1, 1, 4], [0, 1, 5]])
        weights = rng.uniform(-1, 1, size=(2, 3, 3))
        assert check(lambda: ad.total(ad.mul_constant(ad.embedding(table, ids), weights)),
                     [table]) < TOLERANCE


def test_check_mode_switches_precision():
    assert ad.tensor([1.0]).data.dtype == np.float32
    with ad.check_mode():
        assert ad.tensor([1.0]).data.dtype == np.float64
    assert ad.default_dtype() == np.float32


def test_backward_consumes_the_tape():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    loss = ad.total(ad.mul(x, x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    with pytest.raises(StateError):
        ad.backward(loss)


def test_backward_needs_a_scalar():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.scale(x, 2.0))


def test_no_grad_records_nothing():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        out = ad.total(ad.tanh(x))
    assert not out.requires_grad
    with pytest.raises(StateError):
        ad.backward(out)


def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        ad.tensor([np.inf])
    big = ad.tensor([1e30], requires_grad=True)
    with pytest.raises(NumericError):
        ad.mul(big, big)
    ad.GradientTape.discard()


def test_masked_positions_get_exactly_zero_weight():
    scores = ad.tensor([[0.3, 2.0, -1.0]])
    masked = ad.add_constant(scores, np.array([[0.0, ad.MASK_VALUE, 0.0]]))
    weights = ad.softmax(masked).data
    assert weights[0, 1] == 0.0
    assert weights.sum() == pytest.approx(1.0)


def test_cross_entropy_rejects_all_padding():
    logits = ad.tensor(np.zeros((2, 4)), requires_grad=True)
    with pytest.raises(InputError):
        ad.cross_entropy(logits, [0, 0], pad_id=0)


def test_cross_entropy_ignores_padding():
    logits = ad.tensor(np.log([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]]))
    loss = ad.cross_entropy(logits, [1, 0], pad_id=0).item()
    assert loss == pytest.approx(-np.log(0.25), rel=1e-6)


def test_layer_norm_rejects_non_positive_epsilon():
    x = ad.tensor(np.ones((2, 3)))
    with pytest.raises(ConfigError):
        ad.layer_norm(x, ad.tensor(np.ones(3)), ad.tensor(np.zeros(3)), eps=0.0)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_embedding_out_of_range():
    with pytest.raises(InputError):
        ad.embedding(ad.tensor(np.ones((3, 2))), np.array([[0, 3]]))


def test_softmax_of_large_scores_does_not_overflow():
    weights = ad.softmax(ad.tensor([[1000.0, 0.0], [0.0, 0.0]])).data
    assert np.all(np.isfinite(weights))
    np.testing.assert_allclose(weights, [[1.0, 0.0], [0.5, 0.5]], atol=1e-12)


def test_cross_entropy_of_uniform_logits_is_log_vocab():
    logits = ad.tensor(np.zeros((3, 7)), requires_grad=True)
    loss = ad.cross_entropy(logits, [1, 4, 6], pad_id=0).item()
    assert loss == pytest.approx(np.log(7), rel=1e-6)


def test_empty_contraction_gives_zeros():
    product = ad.matmul(ad.tensor(np.ones((1, 0))), ad.tensor(np.ones((0, 3))))
    assert product.data.shape == (1, 3)
    assert np.all(product.data == 0.0)
