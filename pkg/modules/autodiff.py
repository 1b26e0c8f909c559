# ---------------------------------------------------
# autodiff.py - DiffTensor and GradientTape
# ---------------------------------------------------
# A small reverse-mode automatic differentiation
# engine on top of numpy. Every differentiable op
# records its inputs, output and backward rule on the
# active GradientTape; backward() replays the tape in
# reverse exactly once. Training runs in 32-bit, the
# check_mode() context switches new tensors to 64-bit
# for finite-difference gradient verification.
# ---------------------------------------------------

import contextlib
import logging

import numpy as np

from modules.errors import (ConfigError, InputError, NumericError,
                            ShapeError, StateError)

logger = logging.getLogger(__name__)

# Additive score for positions attention may not look at. Finite on purpose,
# softmax with max-subtraction turns it into an exact zero weight.
MASK_VALUE = -1e9


class _Precision:
    dtype = np.float32


def default_dtype():
    return _Precision.dtype


@contextlib.contextmanager
def check_mode():
    """ Creates every new tensor in 64-bit while the context is open. """
    previous = _Precision.dtype
    _Precision.dtype = np.float64
    try:
        yield
    finally:
        _Precision.dtype = previous


def _check_finite(array, where):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values produced by {where}")


# -------------------
#  TENSOR
# -------------------
class DiffTensor:

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, *, requires_grad=False, name=None, dtype=None):
        """
        Dense n-dimensional array taking part in reverse-mode
        differentiation. Leaves created by the user hold the
        learned parameters; op outputs point back to the tape
        that recorded them.
        """
        array = np.array(data, dtype=dtype or default_dtype())
        _check_finite(array, name or "tensor construction")
        self.data = array
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, array):
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor._tape = None
        return tensor

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad):
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match "
                             f"tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return (f"DiffTensor(shape={self.shape}{label}, "
                f"requires_grad={self.requires_grad})")

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, other)
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


# -------------------
#  TAPE
# -------------------
class _Record:

    __slots__ = ("inputs", "output", "rule", "op")

    def __init__(self, inputs, output, rule, op):
        self.inputs = inputs
        self.output = output
        self.rule = rule
        self.op = op


class GradientTape:

    # Shared recording state, one tape is live at a time
    _active = None
    enabled = True

    def __init__(self):
        """
        Ordered list of recorded operations. Records are appended in
        execution order, so every input is recorded before the ops
        that consume it and the reversed list is a valid schedule.
        """
        self.records = []
        self.consumed = False

    @classmethod
    def current(cls):
        if cls._active is None or cls._active.consumed:
            cls._active = cls()
        return cls._active

    @classmethod
    def discard(cls):
        """ Drops whatever the live tape recorded (used on aborted steps). """
        if cls._active is not None:
            cls._active.records.clear()
            cls._active.consumed = True
        cls._active = None

    def record(self, inputs, output, rule, op):
        output._tape = self
        self.records.append(_Record(inputs, output, rule, op))

    def __len__(self):
        return len(self.records)


@contextlib.contextmanager
def no_grad():
    """ Disables recording; used by evaluation, generation and checks. """
    previous = GradientTape.enabled
    GradientTape.enabled = False
    try:
        yield
    finally:
        GradientTape.enabled = previous


def _result(array, inputs, rule, op):
    _check_finite(array, op)
    out = DiffTensor._wrap(array)
    if GradientTape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        GradientTape.current().record(inputs, out, rule, op)
    return out


def backward(loss):
    """
    Populates .grad on every requires_grad tensor reachable from the
    scalar loss, then consumes the tape that produced it.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise StateError("loss was not produced by a live gradient tape")
    if tape.consumed:
        raise StateError("backward already ran for this forward pass")
    tape.consumed = True

    loss.grad = np.ones_like(loss.data)
    for record in reversed(tape.records):
        grad = record.output.grad
        if grad is None:
            continue
        input_grads = record.rule(grad)
        for tensor, tensor_grad in zip(record.inputs, input_grads):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            _check_finite(tensor_grad, f"backward of {record.op}")
            tensor.accumulate(tensor_grad)
    tape.records.clear()
    if GradientTape._active is tape:
        GradientTape._active = None


# -------------------
#  HELPERS
# -------------------
def _sum_to_trailing(grad, shape):
    """ Reduces a broadcast gradient back onto a trailing-dimension shape. """
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    return grad.reshape((-1,) + shape).sum(axis=0)


def _is_trailing(small, big):
    small, big = tuple(small), tuple(big)
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _as_constant(value, like):
    return np.asarray(value, dtype=like.data.dtype)


# -------------------
#  OPERATIONS
# -------------------
def tensor(data, *, requires_grad=False, name=None):
    return DiffTensor(data, requires_grad=requires_grad, name=name)


def matmul(a, b):
    """
    Matrix product over the last two dimensions. The right operand
    is either a plain matrix shared across leading dimensions or has
    exactly the same leading dimensions as the left one.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    shared = b.ndim == 2
    if not shared and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(grad):
        grad_a = np.matmul(grad, np.swapaxes(b_data, -1, -2))
        if shared:
            flat_a = a_data.reshape(-1, a_data.shape[-1])
            grad_b = flat_a.T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a_data, -1, -2), grad)
        return grad_a, grad_b

    return _result(np.matmul(a_data, b_data), (a, b), rule, "matmul")


def add(a, b):
    """ Elementwise sum; b may broadcast over the trailing dimensions of a. """
    if not _is_trailing(b.data.shape, a.data.shape):
        raise ShapeError(f"add cannot broadcast {b.shape} onto {a.shape}")
    b_shape = b.data.shape

    def rule(grad):
        return grad, _sum_to_trailing(grad, b_shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def mul(a, b):
    """ Elementwise product; b may broadcast over trailing dimensions of a. """
    if not _is_trailing(b.data.shape, a.data.shape):
        raise ShapeError(f"mul cannot broadcast {b.shape} onto {a.shape}")
    a_data, b_data = a.data, b.data

    def rule(grad):
        return grad * b_data, _sum_to_trailing(grad * a_data, b_data.shape)

    return _result(a_data * b_data, (a, b), rule, "mul")


def scale(x, factor):
    factor = float(factor)

    def rule(grad):
        return (grad * factor,)

    return _result(x.data * factor, (x,), rule, "scale")


def add_constant(x, constant):
    """ Adds a non-differentiable array (attention masks). """
    constant = _as_constant(constant, x)

    def rule(grad):
        return (grad,)

    out = x.data + constant
    if out.shape != x.data.shape:
        raise ShapeError(f"constant {constant.shape} changes shape {x.shape}")
    return _result(out, (x,), rule, "add_constant")


def mul_constant(x, constant):
    """ Multiplies by a non-differentiable array (dropout masks). """
    constant = _as_constant(constant, x)

    def rule(grad):
        return (grad * constant,)

    out = x.data * constant
    if out.shape != x.data.shape:
        raise ShapeError(f"constant {constant.shape} changes shape {x.shape}")
    return _result(out, (x,), rule, "mul_constant")


def relu(x):
    positive = x.data > 0

    def rule(grad):
        return (grad * positive,)

    return _result(np.where(positive, x.data, 0).astype(x.data.dtype),
                   (x,), rule, "relu")


def tanh(x):
    out = np.tanh(x.data)

    def rule(grad):
        return (grad * (1 - out * out),)

    return _result(out, (x,), rule, "tanh")


def total(x):
    """ Sum of every entry, as a scalar tensor. """
    shape = x.data.shape

    def rule(grad):
        return (np.broadcast_to(grad, shape).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype),
                   (x,), rule, "sum")


def mean(x):
    count = max(x.data.size, 1)
    return scale(total(x), 1.0 / count)


def reshape(x, shape):
    original = x.data.shape

    def rule(grad):
        return (grad.reshape(original),)

    return _result(x.data.reshape(shape), (x,), rule, "reshape")


def transpose(x, axes):
    """ Permutes axes; the result is a contiguous copy, never a view. """
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(grad):
        return (np.ascontiguousarray(np.transpose(grad, inverse)),)

    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), rule,
                   "transpose")


def concat(tensors, axis):
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, rule, "concat")


def repeat_batch(x, batch_size):
    """ Stacks batch_size copies of x along a new leading axis. """
    def rule(grad):
        return (grad.sum(axis=0),)

    out = np.broadcast_to(x.data, (batch_size,) + x.data.shape).copy()
    return _result(out, (x,), rule, "repeat_batch")


def take(x, key):
    """ Basic (slice) indexing; the backward scatters into zeros. """
    shape, dtype = x.data.shape, x.data.dtype

    def rule(grad):
        full = np.zeros(shape, dtype=dtype)
        full[key] = grad
        return (full,)

    return _result(np.array(x.data[key]), (x,), rule, "take")


def embedding(table, ids):
    """ Row lookup of integer ids in a [rows x dim] table. """
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise InputError(f"ids outside the table of {rows} rows")
    shape, dtype = table.data.shape, table.data.dtype

    def rule(grad):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), rule, "embedding")


def softmax(x, axis=-1):
    """ Normalizes along axis; computed with max-subtraction. """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def rule(grad):
        inner = (grad * out).sum(axis=axis, keepdims=True)
        return (out * (grad - inner),)

    return _result(out, (x,), rule, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """ Normalizes the last dimension to mean 0 and variance 1, then gain/bias. """
    if eps <= 0:
        raise ConfigError(f"layer_norm epsilon must be positive, got {eps}")
    width = x.data.shape[-1]
    if gain.data.shape != (width,) or bias.data.shape != (width,):
        raise ShapeError(f"layer_norm gain/bias must have shape [{width}]")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + eps)
    normed = centered * inv_std
    gain_data = gain.data

    def rule(grad):
        grad_normed = grad * gain_data
        grad_x = inv_std * (grad_normed
                            - grad_normed.mean(axis=-1, keepdims=True)
                            - normed * (grad_normed * normed).mean(axis=-1, keepdims=True))
        grad_gain = _sum_to_trailing(grad * normed, (width,))
        grad_bias = _sum_to_trailing(grad, (width,))
        return grad_x, grad_gain, grad_bias

    out = (normed * gain_data + bias.data).astype(x.data.dtype)
    return _result(out, (x, gain, bias), rule, "layer_norm")


def cross_entropy(logits, targets, pad_id):
    """
    Mean negative log-likelihood of the target ids over every
    position that is not padding. Logits are [batch x vocab].
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.data.shape[0] != targets.size:
        raise ShapeError(f"cross_entropy wants [N x V] logits for {targets.size} "
                         f"targets, got {logits.shape}")
    vocab = logits.data.shape[1]
    if targets.size and targets.max() >= vocab:
        raise InputError(f"target id {targets.max()} outside vocabulary of {vocab}")
    live = targets != pad_id
    count = int(live.sum())
    if count == 0:
        raise InputError("every target position is padding, the loss is empty")

    data = logits.data
    shifted = data - data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(targets.size)
    picked = log_probs[rows, targets]
    loss = -(picked * live).sum() / count

    def rule(grad):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        probs *= (live / count)[:, None]
        return ((probs * grad).astype(data.dtype),)

    return _result(np.asarray(loss, dtype=data.dtype), (logits,), rule,
                   "cross_entropy")


# -------------------
#  GRADIENT CHECKING
# -------------------
def finite_difference_check(fn, tensors, *, h=1e-5, max_coordinates=None,
                            rng=None):
    """
    Compares backward gradients of the scalar fn() against central finite
    differences and returns the relative error
    |analytic - numeric| / (|analytic| + |numeric|) over the checked entries.
    Intended for check_mode() tensors.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    backward(loss)
    analytic, numeric = [], []

    with no_grad():
        for t in tensors:
            flat = t.data.reshape(-1)
            grad = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
            indices = np.arange(flat.size)
            if max_coordinates is not None and flat.size > max_coordinates:
                chooser = rng if rng is not None else np.random.default_rng(0)
                indices = chooser.choice(flat.size, size=max_coordinates,
                                         replace=False)
            for index in indices:
                original = flat[index]
                flat[index] = original + h
                plus = fn().item()
                flat[index] = original - h
                minus = fn().item()
                flat[index] = original
                numeric.append((plus - minus) / (2 * h))
                analytic.append(grad[index])

    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denominator = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denominator == 0:
        return 0.0
    error = float(np.linalg.norm(analytic - numeric) / denominator)
    logger.debug("finite difference check over %d entries: %.3e",
                 analytic.size, error)
    return error
