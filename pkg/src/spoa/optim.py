"""Adam parameter stepper over named tensor collections."""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError, ShapeError


class AdamState:
    """Bias-corrected first/second moment state for one parameter partition.

    Moments are zero-initialized lazily from the first gradient layout seen;
    ``step_count`` increases by exactly one per :func:`adam_step`.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def _ensure(self, name, like):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One descent-form Adam update, applied in place to ``params``.

    ``grads`` holds the gradient of the quantity being *minimized*; callers
    maximizing a return pass the negated ascent gradient.  Layouts must match
    key-for-key and shape-for-shape.
    """
    if lr <= 0:
        raise ValueError(f"adam_step learning rate must be > 0, got {lr}")
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"adam_step gradient layout mismatch on keys: {sorted(missing)}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params:
        g = grads[name]
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(
                f"adam_step shape mismatch for {name}: {np.shape(g)} vs {np.shape(p)}")
        state._ensure(name, p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= step
        if not np.isfinite(p.sum()):
            raise NonFiniteError(f"adam_step produced non-finite values in {name}")
    return params
