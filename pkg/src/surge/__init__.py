"""SURGE: dual-path gradient compensation for binarized layers."""

__version__ = "0.1.0"

from surge.dpgc import AGSState, DPGCLayer, ags_update, lambda_init, scope_mask, strip_auxiliary  # noqa: E402
from surge.quantization import BinarizedConv2d, BinarizedLinear, SurrogateRule, sign  # noqa: E402
from surge.tensor import Parameter, Tape, Tensor, stop_gradient  # noqa: E402

__all__ = [
    "AGSState",
    "BinarizedConv2d",
    "BinarizedLinear",
    "DPGCLayer",
    "Parameter",
    "SurrogateRule",
    "Tape",
    "Tensor",
    "ags_update",
    "lambda_init",
    "scope_mask",
    "sign",
    "stop_gradient",
    "strip_auxiliary",
]
