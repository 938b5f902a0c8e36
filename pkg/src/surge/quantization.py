"""Sign binarization with surrogate gradients and the binarized linear/conv layers.

Forward: ``alpha_w * alpha_x * (sign(W) . sign(x))``. Backward: the weight sign
passes its upstream through unchanged; the activation sign multiplies the
upstream by the surrogate derivative of the layer's :class:`SurrogateRule`
(clipped identity for STE, a piecewise-linear bump for Bi-Real). The two
scales are ordinary differentiable scalars.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from surge import kernels
from surge.tensor import Parameter, ShapeError, Tensor, conv2d, matmul_nt, mul

ALPHA_FLOOR = 1e-6
RULE_KINDS = ("ste", "bireal")


def sign(x):
    """Elementwise sign with sign(0) = +1, so the codomain is exactly {-1, +1}."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, -1.0, 1.0)


def ste_activation_backward(upstream, x, clip_bound=1.0):
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ShapeError(f"ste_activation_backward: shapes {upstream.shape} and {x.shape} differ")
    return upstream * (np.abs(x) <= clip_bound)


def ste_weight_backward(upstream):
    return np.asarray(upstream, dtype=np.float64)


def bireal_derivative(x):
    """Derivative of the Bi-Real piecewise quadratic: 2+2x on [-1,0), 2-2x on [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    return np.where((x >= -1) & (x < 0), 2 + 2 * x, np.where((x >= 0) & (x <= 1), 2 - 2 * x, 0.0))


def bireal_activation_backward(upstream, x):
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ShapeError(f"bireal_activation_backward: shapes {upstream.shape} and {x.shape} differ")
    return upstream * bireal_derivative(x)


@dataclass(frozen=True)
class SurrogateRule:
    kind: str = "ste"
    clip_bound: float = 1.0

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown surrogate rule {self.kind!r}; expected one of {RULE_KINDS}")
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be positive, got {self.clip_bound}")

    def activation_backward(self, upstream, x):
        if self.kind == "ste":
            return ste_activation_backward(upstream, x, self.clip_bound)
        # Bi-Real's bump is defined on [-1, 1]; rescale for other clip bounds.
        c = self.clip_bound
        return np.asarray(upstream) * bireal_derivative(np.asarray(x) / c) / c


def binarize_activation(x: Tensor, rule: SurrogateRule) -> Tensor:
    xv = x.data
    return x.tape.record("sign", (x,), sign(xv), lambda g: (rule.activation_backward(g, xv),))


def binarize_weight(w: Tensor) -> Tensor:
    return w.tape.record("sign", (w,), sign(w.data), lambda g: (ste_weight_backward(g),))


def init_alphas(w):
    """Initial scales: alpha_w = mean |W| (floored at 1e-6), alpha_x = 1."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("init_alphas: empty weight tensor")
    return max(float(np.mean(np.abs(w))), ALPHA_FLOOR), 1.0


class _Binarized:
    """Shared state of the binarized operators: latent weights, scales, rule."""

    rule: SurrogateRule

    def __init__(self, weight, rule=None, alphas=None, name=""):
        self.weight = Parameter(weight, f"{name}weight")
        aw, ax = alphas if alphas is not None else init_alphas(self.weight.data)
        self.alpha_w = Parameter(aw, f"{name}alpha_w")
        self.alpha_x = Parameter(ax, f"{name}alpha_x")
        self.rule = rule or SurrogateRule()

    def parameters(self):
        return [self.weight, self.alpha_w, self.alpha_x]

    def clamp_scales(self):
        for p in (self.alpha_w, self.alpha_x):
            np.maximum(p.data, ALPHA_FLOOR, out=p.data)

    def _scaled(self, x: Tensor, raw: Tensor) -> Tensor:
        tape = x.tape
        s = mul(tape.watch(self.alpha_w), tape.watch(self.alpha_x))
        return mul(s, raw)


class BinarizedLinear(_Binarized):
    """Weights of shape (out, in); inputs (in,) or (batch, in)."""

    kind = "binary_linear"

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return binary_linear_forward(x, self)


class BinarizedConv2d(_Binarized):
    """Weights of shape (out_ch, in_ch, k, k); inputs (N, in_ch, H, W)."""

    kind = "binary_conv"

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        tape = x.tape
        if x.data.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"binary_conv: input {x.shape} does not match weight {self.weight.shape}")
        bx = binarize_activation(x, self.rule)
        bw = binarize_weight(tape.watch(self.weight))
        return self._scaled(x, conv2d(bx, bw))


def binary_linear_forward(x: Tensor, layer: BinarizedLinear) -> Tensor:
    tape = x.tape
    if x.data.ndim not in (1, 2) or x.shape[-1] != layer.in_features:
        raise ShapeError(f"binary_linear: input {x.shape} does not match weight {layer.weight.shape}")
    bx = binarize_activation(x, layer.rule)
    bw = binarize_weight(tape.watch(layer.weight))
    return layer._scaled(x, matmul_nt(bx, bw, kernel=kernels.sign_matmul))
