"""
Adam optimizer for Silhouette Lab.
Named parameter arrays updated in place, with per-group learning rates so
layout logits and vertex offsets can move at different speeds.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import InvalidArgumentError, NumericalFailure

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates per parameter, plus the step counter."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One bias-corrected Adam update of every array in params (in place).

    lr is a float or a dict of per-parameter learning rates. A non-finite
    gradient aborts before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgumentError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidArgumentError(
                f"gradient shape {np.shape(g)} does not match parameter {name!r} {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")

    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)

        state.m[name] *= beta1
        state.m[name] += (1.0 - beta1) * g
        state.v[name] *= beta2
        state.v[name] += (1.0 - beta2) * (g * g)

        step = lr[name] if isinstance(lr, dict) else lr
        denom = np.sqrt(state.v[name] / bc2) + eps
        p -= (step / bc1) * state.m[name] / denom
    return params, state

