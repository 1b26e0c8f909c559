# ---------------------------------------------------
# optim.py - Adam Optimizer
# ---------------------------------------------------
# Bias-corrected Adam over a list of DiffTensor leaves.
# Updates are applied in place, in registration order,
# so parameter storage keeps its identity across steps
# and two identical runs give bit-identical values.
# ---------------------------------------------------

import logging
from dataclasses import dataclass, field

import numpy as np

from modules.errors import ConfigError, ShapeError, StateError

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    """ Moments and step counter for every parameter of one optimizer. """
    learning_rate: float
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"Adam betas must lie in (0, 1), got "
                              f"{self.beta1}, {self.beta2}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, "
                              f"got {self.learning_rate}")

    @classmethod
    def for_parameters(cls, params, learning_rate, **kwargs):
        state = cls(learning_rate=learning_rate, **kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state):
    """
    One bias-corrected Adam update of params (in place).
    grads is aligned with params; a missing gradient is an error.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("parameters, gradients and Adam state differ in length")
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            label = param.name or f"#{index}"
            raise StateError(f"parameter {label} has no gradient")
        if grad.shape != state.m[index].shape:
            raise ShapeError(f"gradient of {param.name} has shape {grad.shape}, "
                             f"state expects {state.m[index].shape}")

    state.t += 1
    correction1 = 1 - state.beta1 ** state.t
    correction2 = 1 - state.beta2 ** state.t
    for index, (param, grad) in enumerate(zip(params, grads)):
        m, v = state.m[index], state.v[index]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data -= update.astype(param.data.dtype)


class Adam:

    def __init__(self, params, *, lr, betas=(BETA1, BETA2), eps=EPSILON):
        """
        Convenience wrapper keeping the parameter list together with
        its AdamState. Zero-size parameters are accepted and stay
        untouched, which keeps a length-0 prefix a no-op.
        """
        self.params = list(params)
        self.state = AdamState.for_parameters(
            self.params, lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()
