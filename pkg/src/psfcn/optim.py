"""Adam optimizer (bias-corrected)."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if self.step < 0:
            raise ValidationError(f"step must be >= 0, got {self.step}")


def adam_step(params, grads, state):
    """One Adam update.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays
    (a missing name counts as a zero gradient). Returns a new parameter dict;
    the moment buffers in ``state`` are updated in place and ``state.step``
    is incremented.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    lr = state.learning_rate
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=DTYPE)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} does not match its parameter", {"shape": (g.shape, p.shape)})
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=DTYPE)
            state.v[name] = np.zeros(p.shape, dtype=DTYPE)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr == 0:
            updated[name] = p
            continue
        step = (lr / corr1) * m / (np.sqrt(v / corr2) + state.epsilon)
        updated[name] = Tensor._wrap(p.data - step.astype(DTYPE), requires_grad=p.requires_grad, name=p.name)
    return updated
