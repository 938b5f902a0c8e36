"""Kernel dispatch.

The compiled extension is used when it imports cleanly; otherwise, or when
``SURGE_PURE_PYTHON=1`` is set, the numpy fallback is used. Both backends
expose the same five functions with identical signatures.
"""
import logging
import os

from surge import _fallback

logger = logging.getLogger(__name__)

KERNEL_NAMES = (
    "sign_matmul",
    "conv2d_same",
    "conv2d_same_grad_input",
    "conv2d_same_grad_weight",
    "pair_moments",
)


def _load_compiled():
    try:
        from surge import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = None if os.environ.get("SURGE_PURE_PYTHON") == "1" else _load_compiled()

BACKEND = "cython" if _compiled is not None else "python"
if _compiled is None:
    logger.debug("surge: compiled kernels unavailable, using numpy fallback")


def available_backends():
    names = ["python"]
    if _load_compiled() is not None:
        names.insert(0, "cython")
    return names


def get_backend(name):
    """Return the module implementing the named backend ('cython' or 'python')."""
    if name == "python":
        return _fallback
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("compiled surge kernels are not built")
        return mod
    raise ValueError(f"unknown kernel backend {name!r}")


_impl = _compiled if _compiled is not None else _fallback

sign_matmul = _impl.sign_matmul
conv2d_same = _impl.conv2d_same
conv2d_same_grad_input = _impl.conv2d_same_grad_input
conv2d_same_grad_weight = _impl.conv2d_same_grad_weight
pair_moments = _impl.pair_moments
