"""Backend selection for the loop-heavy image kernels.

The compiled Cython module is used when it was built; otherwise the
pure-Python twin is loaded. Set ``RITSEG_KERNELS=python`` to force the
fallback (useful for benchmarking and for cross-checking the two).
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    if os.environ.get("RITSEG_KERNELS", "").lower() == "python":
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
_impl: ModuleType = _compiled if _compiled is not None else _pykernels

BACKEND = "cython" if _compiled is not None else "python"


def available_backends() -> dict[str, ModuleType]:
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found


KERNEL_NAMES = ("edt_squared", "nms", "hysteresis", "conv_nhwc", "conv_weight_grad_nhwc", "leaky_relu",
                "leaky_relu_grad")

edt_squared = _impl.edt_squared
nms = _impl.nms
hysteresis = _impl.hysteresis
conv_nhwc = _impl.conv_nhwc
conv_weight_grad_nhwc = _impl.conv_weight_grad_nhwc
leaky_relu = _impl.leaky_relu
leaky_relu_grad = _impl.leaky_relu_grad
