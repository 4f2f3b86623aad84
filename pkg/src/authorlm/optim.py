"""Adam with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .numeric import NumericError, ParamSet


class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}


def adam_step(params: ParamSet, state: AdamState, lr, weight_decay=0.0):
    """One Adam update with bias correction.

    Decay is decoupled: non-exempt entries shrink by lr*wd*value before
    the moment update.  An entry's `wd_rate` overrides the global rate.
    All gradients are zeroed afterward.
    """
    if lr < 0:
        raise NumericError(f"negative learning rate: {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        wd = 0.0 if p.wd_exempt else (weight_decay if p.wd_rate is None else p.wd_rate)
        if wd:
            p.tensor.value -= lr * wd * p.tensor.value
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.tensor.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grads()


def clip_global_norm(params: ParamSet, max_norm):
    """Scale all gradients down so their joint L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise NumericError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    grads = [p.tensor.grad for p in params if p.trainable]
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm
