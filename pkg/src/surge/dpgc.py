"""Dual-path gradient compensation around a binarized layer.

A :class:`DPGCLayer` runs a full-precision auxiliary operator next to the
binarized one and returns::

    f_b + (lam * f_a - stop_gradient(lam * f_a))

The bracket is exactly zero in the forward pass, so outputs are the
binarized outputs bit for bit, while the adjoint reaching the input becomes
``g_b + lam * g_a``. ``lam`` is refreshed after every backward pass by the
norm-ratio rule ``eta * |g_b| / (|g_a| + eps)`` and consumed one step later.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from surge import kernels
from surge.quantization import BinarizedConv2d, BinarizedLinear
from surge.tensor import Parameter, ShapeError, Tensor, add, conv2d, matmul_nt, scale, stop_gradient, sub

SCOPES = ("all", "clipped_only", "in_range_only")
DEFAULT_EPS = 1e-8


def lambda_init(aux_param_count: int) -> float:
    """Initial compensator scale, 1/sqrt(|W_a|)."""
    if aux_param_count < 1:
        raise ValueError(f"lambda_init: auxiliary parameter count must be >= 1, got {aux_param_count}")
    return 1.0 / math.sqrt(aux_param_count)


@dataclass
class AGSState:
    eta: float = 0.01
    eps: float = DEFAULT_EPS
    lam: float = 1.0
    adaptive: bool = True
    last_norms: tuple[float, float] = (0.0, 0.0)
    # one (lam_used, |g_b|, |g_a|, lam_next) tuple per update
    history: list[tuple[float, float, float, float]] = field(default_factory=list)


def ags_update(state: AGSState, g_b, g_a) -> float:
    """Store the norms of this step's branch gradients and return the new scale.

    With ``state.adaptive`` false the scale is held fixed (constant-scale
    ablation) but the norms are still recorded.
    """
    nb = float(np.linalg.norm(np.ravel(g_b)))
    na = float(np.linalg.norm(np.ravel(g_a)))
    used = state.lam
    if state.adaptive:
        state.lam = state.eta * nb / (na + state.eps)
    state.last_norms = (nb, na)
    state.history.append((used, nb, na, state.lam))
    return state.lam


def scope_mask(g_a, x, scope: str, clip_bound: float = 1.0):
    """Restrict compensation to clipped (|x| > c) or in-range (|x| <= c) entries."""
    g_a = np.asarray(g_a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if g_a.shape != x.shape:
        raise ShapeError(f"scope_mask: shapes {g_a.shape} and {x.shape} differ")
    if scope == "all":
        return g_a.copy()
    if scope == "clipped_only":
        return g_a * (np.abs(x) > clip_bound)
    if scope == "in_range_only":
        return g_a * (np.abs(x) <= clip_bound)
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


@dataclass
class DPGCGrads:
    g_b: np.ndarray     # input adjoint through the binarized branch
    g_a: np.ndarray     # auxiliary input gradient, scope-masked, before lam
    g_wb: np.ndarray    # latent-weight gradient (STE weight rule)
    g_wa: np.ndarray    # auxiliary-weight gradient, already scaled by lam
    total: np.ndarray   # adjoint this layer sends to its input
    lam: float          # scale used in the forward pass


@dataclass
class _Trace:
    tape: object
    x: Tensor
    xb: Tensor
    xa: Tensor
    out: Tensor
    lam: float


class DPGCLayer:
    """A binarized layer plus a full-precision compensator branch.

    ``surge_star`` (conv only) makes the auxiliary kernels 1x1; with
    ``fixed_lambda`` set the scale never adapts.
    """

    kind = "dpgc"

    def __init__(self, main, aux_weight=None, eta=0.01, eps=DEFAULT_EPS, scope="all",
                 surge_star=False, fixed_lambda=None, lam=None, name=""):
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
        if surge_star and not isinstance(main, BinarizedConv2d):
            raise ValueError("surge_star applies to convolutional layers only")
        self.main = main
        self.scope = scope
        self.surge_star = surge_star
        if aux_weight is None:
            w = main.weight.data
            if surge_star:
                k = w.shape[2] // 2
                aux_weight = w[:, :, k:k + 1, k:k + 1]
            else:
                aux_weight = w
        self.aux_weight = Parameter(np.array(aux_weight, dtype=np.float64), f"{name}aux_weight")
        self._check_aux_shape()
        if fixed_lambda is not None:
            self.ags = AGSState(eta=eta, eps=eps, lam=float(fixed_lambda), adaptive=False)
        else:
            start = lambda_init(self.aux_weight.size) if lam is None else float(lam)
            self.ags = AGSState(eta=eta, eps=eps, lam=start)
        self._trace: _Trace | None = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_trace"] = None
        return state

    def _check_aux_shape(self):
        ws, wa = self.main.weight.shape, self.aux_weight.shape
        if isinstance(self.main, BinarizedLinear):
            ok = wa == ws
        else:
            k = 1 if self.surge_star else ws[2]
            ok = wa == (ws[0], ws[1], k, k)
        if not ok:
            raise ShapeError(f"dpgc: auxiliary weight {wa} does not match main weight {ws}")

    @property
    def rule(self):
        return self.main.rule

    @property
    def lam(self):
        return self.ags.lam

    def parameters(self):
        return self.main.parameters() + [self.aux_weight]

    def clamp_scales(self):
        self.main.clamp_scales()

    def __call__(self, x: Tensor) -> Tensor:
        return dpgc_forward(x, self)

    def backward_parts(self, grads) -> DPGCGrads:
        return dpgc_backward(grads, self)

    def update_lambda(self, parts: DPGCGrads) -> float:
        return ags_update(self.ags, parts.g_b, parts.g_a)

    def aux_input_grad(self, upstream):
        """Raw auxiliary-branch input gradient for a given output adjoint."""
        wa = self.aux_weight.data
        if isinstance(self.main, BinarizedLinear):
            u = np.asarray(upstream)
            return (u.reshape(-1, wa.shape[0]) @ wa).reshape(u.shape[:-1] + (wa.shape[1],))
        return kernels.conv2d_same_grad_input(upstream, wa)


def _gate(x: Tensor, mask) -> Tensor:
    return x.tape.record("scope_gate", (x,), x.data.copy(),
                         (lambda g: (g,)) if mask is None else (lambda g: (g * mask,)))


def _tap(x: Tensor) -> Tensor:
    return x.tape.record("tap", (x,), x.data.copy(), lambda g: (g,))


def dpgc_forward(x: Tensor, layer: DPGCLayer) -> Tensor:
    tape = x.tape
    lam = layer.ags.lam
    xv = x.data
    if layer.scope == "all":
        mask = None
    else:
        mask = scope_mask(np.ones_like(xv), xv, layer.scope, layer.main.rule.clip_bound)
    xb = _tap(x)
    fb = layer.main(xb)
    xa = _gate(x, mask)
    wa = tape.watch(layer.aux_weight)
    if isinstance(layer.main, BinarizedLinear):
        fa = matmul_nt(xa, wa)
    else:
        fa = conv2d(xa, wa)
    if fa.shape != fb.shape:
        raise ShapeError(f"dpgc: auxiliary output {fa.shape} does not match main output {fb.shape}")
    fao = scale(fa, lam)
    out = add(fb, sub(fao, stop_gradient(fao)))
    layer._trace = _Trace(tape, x, xb, xa, out, lam)
    return out


def dpgc_backward(grads, layer: DPGCLayer) -> DPGCGrads:
    tr = layer._trace
    if tr is None or grads.tape is not tr.tape:
        raise RuntimeError("dpgc_backward called before dpgc_forward on this tape")
    u = grads[tr.out]
    g_a = scope_mask(layer.aux_input_grad(u), tr.x.data, layer.scope, layer.main.rule.clip_bound)
    g_b = grads[tr.xb].copy()
    # adjoint leaving the scope gate, i.e. after the mask
    aux_total = scope_mask(grads[tr.xa], tr.x.data, layer.scope, layer.main.rule.clip_bound)
    return DPGCGrads(
        g_b=g_b,
        g_a=g_a,
        g_wb=grads[layer.main.weight].copy(),
        g_wa=grads[layer.aux_weight].copy(),
        total=g_b + aux_total,
        lam=tr.lam,
    )


def strip_layer(layer):
    """Binarized main branch of a DPGC layer (a copy); other layers pass through."""
    if isinstance(layer, DPGCLayer):
        return copy.deepcopy(layer.main)
    return layer


def strip_auxiliary(model):
    """Copy of ``model`` with every auxiliary branch and scale state removed.

    Accepts a single layer or any object with a ``layers`` list.
    """
    if isinstance(model, DPGCLayer):
        return strip_layer(model)
    if not hasattr(model, "layers"):
        return copy.deepcopy(model)
    out = copy.copy(model)
    out.layers = [strip_layer(layer) if isinstance(layer, DPGCLayer) else copy.deepcopy(layer)
                  for layer in model.layers]
    return out
