"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports; set ``FEDFRAUD_KERNELS=python``
to force the fallback (useful for benchmarking and for cross-checking).
"""
import logging
import os

import numpy as np

from . import _fallback

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("FEDFRAUD_KERNELS", "auto") != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
log.debug("fedfraud kernels backend: %s", BACKEND)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if _compiled is not None:

    def layernorm_relu_forward(z, gain, offset, eps):
        return _compiled.layernorm_relu_forward(_c(z), _c(gain), _c(offset), float(eps))

    def layernorm_relu_backward(dout, out, xhat, inv_std, gain):
        return _compiled.layernorm_relu_backward(_c(dout), _c(out), _c(xhat), _c(inv_std), _c(gain))

else:
    layernorm_relu_forward = _fallback.layernorm_relu_forward
    layernorm_relu_backward = _fallback.layernorm_relu_backward

# numpy's vectorized trig beats a scalar libm loop, so Haversine has no compiled twin
haversine = _fallback.haversine

__all__ = [
    "BACKEND",
    "haversine",
    "layernorm_relu_backward",
    "layernorm_relu_forward",
]
