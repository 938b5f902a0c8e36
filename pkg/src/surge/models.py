"""Layers, the sequential model container, the Beale toy network and the
small classifiers.

Training modes (one per binarizable layer)::

    FP            full-precision linear/conv
    STE           sign binarization, clipped-identity surrogate
    BiReal        sign binarization, piecewise-polynomial surrogate
    STE+SURGE     STE layer wrapped in a DPGCLayer
    BiReal+SURGE  Bi-Real layer wrapped in a DPGCLayer
    STE+Noise     STE layer whose input gradient receives Gaussian noise of
                  std eta*|g|/sqrt(d), matching the compensator's norm budget
"""
from __future__ import annotations

import numpy as np

from surge.dpgc import DEFAULT_EPS, DPGCLayer
from surge.quantization import BinarizedConv2d, BinarizedLinear, SurrogateRule
from surge.tensor import (
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    conv2d,
    index,
    matmul_nt,
    mean_axes,
    mul,
    relu,
    scale,
    square,
)

MODES = ("FP", "STE", "STE+SURGE", "BiReal", "BiReal+SURGE", "STE+Noise")
_MODE_LOOKUP = {m.lower(): m for m in MODES}
BEALE_OPTIMUM = (3.0, 0.5)


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_LOOKUP[str(mode).lower()]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}") from None


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


# --------------------------------------------------------------------------
# layers

class Linear:
    kind = "linear"

    def __init__(self, weight, bias=None, name=""):
        self.weight = Parameter(weight, f"{name}weight")
        self.bias = None if bias is None else Parameter(bias, f"{name}bias")

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        tape = x.tape
        out = matmul_nt(x, tape.watch(self.weight))
        if self.bias is not None:
            out = add(out, tape.watch(self.bias))
        return out


class Conv2d:
    kind = "conv"

    def __init__(self, weight, name=""):
        self.weight = Parameter(weight, f"{name}weight")
        self.bias = None

    def parameters(self):
        return [self.weight]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, x.tape.watch(self.weight))


class ReLU:
    kind = "relu"

    def parameters(self):
        return []

    def __call__(self, x):
        return relu(x)


class GlobalAvgPool:
    kind = "gap"

    def parameters(self):
        return []

    def __call__(self, x):
        return mean_axes(x, (2, 3))


class GradientNoise:
    """Wraps a binarized layer; adds Gaussian noise to its input adjoint."""

    kind = "noise"

    def __init__(self, main, eta=0.01, seed=0):
        self.main = main
        self.eta = float(eta)
        self.seed = int(seed)
        self.rng = make_rng(seed)

    @property
    def rule(self):
        return self.main.rule

    def parameters(self):
        return self.main.parameters()

    def clamp_scales(self):
        self.main.clamp_scales()

    def __call__(self, x: Tensor) -> Tensor:
        def vjp(g):
            if self.eta == 0.0:
                return (g,)
            sigma = self.eta * float(np.linalg.norm(g)) / np.sqrt(g.size)
            return (g + sigma * self.rng.standard_normal(g.shape),)

        return self.main(x.tape.record("noise_gate", (x,), x.data.copy(), vjp))


def binarized_inner(layer):
    """The binarized operator inside a (possibly wrapped) quantized layer, else None."""
    if isinstance(layer, (BinarizedLinear, BinarizedConv2d)):
        return layer
    if isinstance(layer, (DPGCLayer, GradientNoise)):
        return layer.main
    return None


def make_layer(mode, weight, *, conv=False, eta=0.01, eps=DEFAULT_EPS, scope="all",
               surge_star=False, fixed_lambda=None, noise_seed=0, clip_bound=1.0, name=""):
    """Build one layer in the given training mode from a shared initial weight."""
    mode = canonical_mode(mode)
    weight = np.array(weight, dtype=np.float64)
    if mode == "FP":
        return Conv2d(weight, name) if conv else Linear(weight, name=name)
    rule = SurrogateRule("bireal" if mode.startswith("BiReal") else "ste", clip_bound)
    cls = BinarizedConv2d if conv else BinarizedLinear
    main = cls(weight, rule=rule, name=name)
    if mode.endswith("+SURGE"):
        return DPGCLayer(main, eta=eta, eps=eps, scope=scope, surge_star=surge_star and conv,
                         fixed_lambda=fixed_lambda, name=f"{name}")
    if mode == "STE+Noise":
        return GradientNoise(main, eta=eta, seed=noise_seed)
    return main


# --------------------------------------------------------------------------
# model container

class Model:
    """A sequential stack of layers.

    ``fixed_input`` (toy model) is fed when no input is given. The model
    remembers the input tensor of every binarizable layer from its latest
    forward pass so the training loop can read their adjoints.
    """

    def __init__(self, layers, task="classifier", fixed_input=None, arch=None):
        self.layers = list(layers)
        self.task = task
        self.fixed_input = None if fixed_input is None else np.asarray(fixed_input, dtype=np.float64)
        self.arch = dict(arch or {})
        self.layer_inputs: dict[int, Tensor] = {}

    def __call__(self, x: Tensor | None = None, tape: Tape | None = None) -> Tensor:
        if x is None:
            if self.fixed_input is None:
                raise ValueError("model has no fixed input; pass x")
            x = (tape or Tape()).constant(self.fixed_input)
        self.layer_inputs = {}
        for i, layer in enumerate(self.layers):
            if binarized_inner(layer) is not None:
                self.layer_inputs[i] = x
            x = layer(x)
        return x

    def predict(self, x=None) -> np.ndarray:
        tape = Tape()
        out = self(None if x is None else tape.constant(x), tape=tape)
        return out.data.copy()

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def quant_layer_indices(self):
        return [i for i, layer in enumerate(self.layers) if binarized_inner(layer) is not None]

    def quant_layers(self):
        return [self.layers[i] for i in self.quant_layer_indices()]

    def dpgc_layers(self):
        return [layer for layer in self.layers if isinstance(layer, DPGCLayer)]

    def clamp_scales(self):
        for layer in self.layers:
            if hasattr(layer, "clamp_scales"):
                layer.clamp_scales()


# --------------------------------------------------------------------------
# Beale objective

def beale(x, y):
    """Standard Beale function; global minimum 0 at (3, 0.5)."""
    return (1.5 - x + x * y) ** 2 + (2.25 - x + x * y ** 2) ** 2 + (2.625 - x + x * y ** 3) ** 2


def beale_tensor(xy: Tensor) -> Tensor:
    """Beale loss of a length-2 tensor, recorded on its tape."""
    if xy.shape != (2,):
        raise ShapeError(f"beale: expected a length-2 coordinate tensor, got {xy.shape}")
    x, y = index(xy, 0), index(xy, 1)
    y2 = mul(y, y)
    y3 = mul(y2, y)
    total = None
    for c, yp in ((1.5, y), (2.25, y2), (2.625, y3)):
        term = square(add(add(xy.tape.constant(c), scale(x, -1.0)), mul(x, yp)))
        total = term if total is None else add(total, term)
    return total


def dist_to_opt(xy) -> float:
    xy = np.asarray(xy, dtype=np.float64)
    return float(np.hypot(xy[0] - BEALE_OPTIMUM[0], xy[1] - BEALE_OPTIMUM[1]))


# --------------------------------------------------------------------------
# builders

def _as_modes(mode_per_layer, n):
    if isinstance(mode_per_layer, str):
        return [canonical_mode(mode_per_layer)] * n
    modes = [canonical_mode(m) for m in mode_per_layer]
    if len(modes) != n:
        raise ValueError(f"expected {n} layer modes, got {len(modes)}")
    return modes


def toy_initial_weights(hidden_size, input_dim, seed):
    """Initial (W1, W2) shared by every mode for a given seed."""
    rng = make_rng(seed)
    return (
        rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(hidden_size, input_dim)),
        rng.normal(0.0, 1.0 / np.sqrt(hidden_size), size=(2, hidden_size)),
    )


def build_toy_model(hidden_size=16, mode_per_layer="STE", seed=0, input_dim=4, eta=0.01,
                    eps=DEFAULT_EPS, scope="all", fixed_lambda=None):
    """Beale coordinate network: ones(input_dim) -> L1 -> act -> L2 -> (x, y).

    Both linear layers are binarizable. ``act`` is a ReLU when L2 is full
    precision; in front of a binarized L2 the sign binarizer is the
    activation (with sign(0)=+1 a ReLU there would pin every binary
    activation to +1 and cut L1 out of the forward pass).
    """
    if hidden_size < 1 or input_dim < 1:
        raise ValueError("hidden_size and input_dim must be >= 1")
    m1, m2 = _as_modes(mode_per_layer, 2)
    w1, w2 = toy_initial_weights(hidden_size, input_dim, seed)
    common = dict(eta=eta, eps=eps, scope=scope, fixed_lambda=fixed_lambda)
    layers = [make_layer(m1, w1, noise_seed=seed * 2 + 1_000_003, name="l1.", **common)]
    second = make_layer(m2, w2, noise_seed=seed * 2 + 1_000_004, name="l2.", **common)
    if binarized_inner(second) is None:
        layers.append(ReLU())
    layers.append(second)
    arch = dict(kind="toy", hidden_size=hidden_size, input_dim=input_dim, modes=[m1, m2], seed=seed)
    return Model(layers, task="beale", fixed_input=np.ones(input_dim), arch=arch)


def build_classifier(kind="mlp", layer_sizes=(2, 32, 32, 2), mode="STE", seed=0, eta=0.01,
                     eps=DEFAULT_EPS, scope="all", surge_star=False, fixed_lambda=None,
                     image_size=8):
    """MLP or tiny CNN whose first and last layers stay full precision.

    MLP: ``layer_sizes = [in, h1, ..., out]``; every hidden-to-hidden layer
    takes ``mode``. A ReLU precedes each full-precision layer after the first;
    binarized layers get no extra activation (sign is their nonlinearity).

    CNN: ``layer_sizes = [in_ch, c1, c2, ..., n_classes]``; 3x3 convolutions,
    the first full precision, the rest in ``mode``, then ReLU, global average
    pooling and a full-precision linear head.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {layer_sizes!r}: need at least [in, hidden, out], all >= 1")
    mode = canonical_mode(mode)
    rng = make_rng(seed)
    common = dict(eta=eta, eps=eps, scope=scope, fixed_lambda=fixed_lambda)
    layers = []
    if kind == "mlp":
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            outer = i == 0 or i == n_layers - 1
            layer = (Linear(w, np.zeros(fan_out), name=f"l{i}.") if outer
                     else make_layer(mode, w, noise_seed=seed * 7919 + i, name=f"l{i}.", **common))
            if i > 0 and binarized_inner(layer) is None:
                layers.append(ReLU())
            layers.append(layer)
    elif kind == "cnn":
        chans, n_classes = sizes[:-1], sizes[-1]
        for i in range(len(chans) - 1):
            w = rng.normal(0.0, 1.0 / np.sqrt(chans[i] * 9), size=(chans[i + 1], chans[i], 3, 3))
            if i == 0:
                layer = Conv2d(w, name="c0.")
            else:
                layer = make_layer(mode, w, conv=True, surge_star=surge_star,
                                   noise_seed=seed * 7919 + i, name=f"c{i}.", **common)
                if binarized_inner(layer) is None:
                    layers.append(ReLU())
            layers.append(layer)
        layers += [ReLU(), GlobalAvgPool()]
        w = rng.normal(0.0, 1.0 / np.sqrt(chans[-1]), size=(n_classes, chans[-1]))
        layers.append(Linear(w, np.zeros(n_classes), name="head."))
    else:
        raise ValueError(f"unknown classifier kind {kind!r}; expected 'mlp' or 'cnn'")
    arch = dict(kind=kind, layer_sizes=sizes, mode=mode, seed=seed, image_size=image_size)
    return Model(layers, task="classifier", arch=arch)
