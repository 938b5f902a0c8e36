"""Plain SGD and Adam over lists of :class:`~surge.tensor.Parameter`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from surge.tensor import ShapeError


def _check(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"optimizer: {len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(g) != p.data.shape:
            raise ShapeError(f"optimizer: gradient shape {np.shape(g)} does not match {p.name or 'parameter'} {p.data.shape}")


def sgd_step(params, grads, lr):
    """In-place ``p <- p - lr * g``; returns ``params``."""
    _check(params, grads)
    for p, g in zip(params, grads):
        p.data -= lr * np.asarray(g)
    return params


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, in place. Moments are keyed by parameter identity."""
    _check(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in zip(params, grads):
        g = np.asarray(g)
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Optimizer:
    """Thin stateful wrapper so the training loop can treat both kinds alike."""

    def __init__(self, kind="sgd", lr=0.01):
        kind = kind.lower()
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
        self.kind = kind
        self.lr = lr
        self.state = AdamState(lr=lr) if kind == "adam" else None

    def step(self, params, grads):
        if self.kind == "sgd":
            return sgd_step(params, grads, self.lr)
        return adam_step(self.state, params, grads)
