"""SGD, Adam, and AdamW on Parameter sets.

Adam follows the bias-corrected moment update; AdamW applies decoupled
weight decay (SGD and Adam fold decay into the gradient). Frozen parameters
are skipped entirely and gradients are zeroed after each applied step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from mlfd.errors import ConfigError, NumericError
from mlfd.numerics.tensor import Parameter

_KINDS = ("sgd", "adam", "adamw")


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in _KINDS:
            raise ConfigError(f"optimizer kind must be one of {_KINDS}, got {self.kind!r}")
        self.kind = kind
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def optimizer_step(state: OptimizerState, params: Iterable[Parameter]) -> None:
    """Apply one update to all non-frozen parameters, then zero their grads."""
    params = list(params)
    state.step_count += 1
    t = state.step_count
    lr, wd = state.learning_rate, state.weight_decay

    for param in params:
        if param.frozen:
            continue
        g = param.value.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {param.name!r}")
        w = param.value.data

        if state.kind == "sgd":
            step = g if wd == 0.0 else g + wd * w
            w -= lr * step
        else:
            key = id(param)
            m = state.first_moment.get(key)
            if m is None:
                m = state.first_moment[key] = np.zeros_like(w)
            v = state.second_moment.get(key)
            if v is None:
                v = state.second_moment[key] = np.zeros_like(w)
            if v.shape != w.shape or m.shape != w.shape:
                raise ConfigError(f"moment shape mismatch for parameter {param.name!r}")

            if state.kind == "adam" and wd != 0.0:
                g = g + wd * w
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            if state.kind == "adamw" and wd != 0.0:
                w -= lr * wd * w
            w -= lr * m_hat / (np.sqrt(v_hat) + state.eps)

        param.zero_grad()
