"""Binary checkpoint container.

Layout (little-endian)::

    b"SRGE"  u32 version=1  u8 stripped  u32 meta_len  meta(JSON, utf-8)
    u32 n_records, then one record per layer:
        u8 kind, kind-specific payload

Arrays are stored as ``u8 ndim, u32 dims[ndim], f64 data[...]``. Binarized
layers carry ``u8 rule, f64 clip, W_b, f64 alpha_w, f64 alpha_x, u8 wrapper``
and, when the auxiliary branch is kept, ``W_a, f64 lambda, f64 eta, f64 eps,
u8 scope, u8 surge_star, u8 adaptive``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from surge.dpgc import SCOPES, DPGCLayer
from surge.models import Conv2d, GlobalAvgPool, GradientNoise, Linear, Model, ReLU
from surge.quantization import BinarizedConv2d, BinarizedLinear, SurrogateRule

MAGIC = b"SRGE"
VERSION = 1

K_LINEAR, K_CONV, K_RELU, K_GAP, K_BLINEAR, K_BCONV = range(6)
W_NONE, W_DPGC, W_NOISE = range(3)
RULES = ("ste", "bireal")


class CheckpointError(ValueError):
    pass


def _w(buf, fmt, *vals):
    buf.write(struct.pack("<" + fmt, *vals))


def _r(buf, fmt):
    size = struct.calcsize("<" + fmt)
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError("truncated checkpoint")
    out = struct.unpack("<" + fmt, data)
    return out if len(out) > 1 else out[0]


def _write_array(buf, a):
    a = np.asarray(a, dtype="<f8")
    _w(buf, "B", a.ndim)
    for n in a.shape:
        _w(buf, "I", n)
    buf.write(np.ascontiguousarray(a).tobytes())


def _read_array(buf):
    ndim = _r(buf, "B")
    shape = tuple(_r(buf, "I") for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = buf.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _write_layer(buf, layer, strip):
    if isinstance(layer, Linear):
        _w(buf, "B", K_LINEAR)
        _write_array(buf, layer.weight.data)
        _w(buf, "B", layer.bias is not None)
        if layer.bias is not None:
            _write_array(buf, layer.bias.data)
        return
    if isinstance(layer, Conv2d):
        _w(buf, "B", K_CONV)
        _write_array(buf, layer.weight.data)
        return
    if isinstance(layer, ReLU):
        _w(buf, "B", K_RELU)
        return
    if isinstance(layer, GlobalAvgPool):
        _w(buf, "B", K_GAP)
        return
    inner = layer.main if isinstance(layer, (DPGCLayer, GradientNoise)) else layer
    if not isinstance(inner, (BinarizedLinear, BinarizedConv2d)):
        raise CheckpointError(f"cannot serialize layer {type(layer).__name__}")
    _w(buf, "B", K_BLINEAR if isinstance(inner, BinarizedLinear) else K_BCONV)
    _w(buf, "Bd", RULES.index(inner.rule.kind), inner.rule.clip_bound)
    _write_array(buf, inner.weight.data)
    _w(buf, "dd", float(inner.alpha_w.data), float(inner.alpha_x.data))
    if isinstance(layer, DPGCLayer) and not strip:
        _w(buf, "B", W_DPGC)
        _write_array(buf, layer.aux_weight.data)
        a = layer.ags
        _w(buf, "dddBBB", a.lam, a.eta, a.eps, SCOPES.index(layer.scope), layer.surge_star, a.adaptive)
    elif isinstance(layer, GradientNoise):
        _w(buf, "B", W_NOISE)
        _w(buf, "dQ", layer.eta, layer.seed)
    else:
        _w(buf, "B", W_NONE)


def _read_layer(buf):
    kind = _r(buf, "B")
    if kind == K_LINEAR:
        w = _read_array(buf)
        return Linear(w, _read_array(buf) if _r(buf, "B") else None)
    if kind == K_CONV:
        return Conv2d(_read_array(buf))
    if kind == K_RELU:
        return ReLU()
    if kind == K_GAP:
        return GlobalAvgPool()
    if kind not in (K_BLINEAR, K_BCONV):
        raise CheckpointError(f"unknown layer record kind {kind}")
    rule_idx, clip = _r(buf, "Bd")
    w = _read_array(buf)
    aw, ax = _r(buf, "dd")
    cls = BinarizedLinear if kind == K_BLINEAR else BinarizedConv2d
    main = cls(w, rule=SurrogateRule(RULES[rule_idx], clip), alphas=(aw, ax))
    wrapper = _r(buf, "B")
    if wrapper == W_DPGC:
        wa = _read_array(buf)
        lam, eta, eps, scope, star, adaptive = _r(buf, "dddBBB")
        layer = DPGCLayer(main, aux_weight=wa, eta=eta, eps=eps, scope=SCOPES[scope],
                          surge_star=bool(star), fixed_lambda=None if adaptive else lam, lam=lam)
        return layer
    if wrapper == W_NOISE:
        eta, seed = _r(buf, "dQ")
        return GradientNoise(main, eta=eta, seed=seed)
    return main


def dumps(model: Model, strip=False) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _w(buf, "IB", VERSION, bool(strip))
    meta = {
        "task": model.task,
        # the stripped flag lives in the header byte
        "arch": {k: v for k, v in model.arch.items() if k != "stripped"},
        "fixed_input": None if model.fixed_input is None else model.fixed_input.tolist(),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    _w(buf, "I", len(blob))
    buf.write(blob)
    _w(buf, "I", len(model.layers))
    for layer in model.layers:
        _write_layer(buf, layer, strip)
    return buf.getvalue()


def loads(data: bytes) -> Model:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a SURGE checkpoint (bad magic)")
    version, stripped = _r(buf, "IB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = json.loads(buf.read(_r(buf, "I")).decode())
    layers = [_read_layer(buf) for _ in range(_r(buf, "I"))]
    if buf.read(1):
        raise CheckpointError("trailing bytes after last record")
    arch = dict(meta.get("arch") or {})
    arch["stripped"] = bool(stripped)
    return Model(layers, task=meta.get("task", "classifier"), fixed_input=meta.get("fixed_input"), arch=arch)


def export_checkpoint(model: Model, path, strip=False) -> Path:
    path = Path(path)
    try:
        path.write_bytes(dumps(model, strip=strip))
    except OSError as exc:
        raise IOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def has_auxiliary(model: Model) -> bool:
    return any(isinstance(layer, DPGCLayer) for layer in model.layers)
