"""Adam with bias correction."""

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def for_param(cls, param, **hyper):
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param, state):
    """Apply one bias-corrected Adam update in place and clear ``param.grad``."""
    if param.grad is None:
        raise RuntimeError("adam_step: parameter has no gradient")
    if state.m.shape != param.shape:
        raise ValueError(f"adam_step: state shape {state.m.shape} != param shape {param.shape}")
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** t)
    v_hat = state.v / (1 - state.beta2 ** t)
    param.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.data.dtype)
    param.grad = None


class Adam:
    """Adam over a named parameter dict.

    ``pinned_rows`` maps a parameter name to row indices whose gradient is
    zeroed before every step (the padding row of embedding tables).
    Parameters that received no gradient are stepped with a zero gradient,
    so their moments still decay.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, pinned_rows=None):
        self.params = params
        self.pinned_rows = dict(pinned_rows or {})
        self.states = {
            name: AdamState.for_param(p, beta1=beta1, beta2=beta2, epsilon=epsilon, learning_rate=lr)
            for name, p in params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            rows = self.pinned_rows.get(name)
            if rows is not None:
                p.grad[rows] = 0
            adam_step(p, self.states[name])

    @property
    def step_count(self):
        return max((s.step_count for s in self.states.values()), default=0)
