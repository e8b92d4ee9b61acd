import os
import subprocess
import sys

import numpy as np
import pytest

from fedfraud import kernels
from fedfraud.kernels import _fallback

compiled = pytest.mark.skipif(kernels._compiled is None, reason="compiled kernels not built")


@compiled
def test_backend_is_compiled_when_built():
    assert kernels.BACKEND == "cython"


@compiled
@pytest.mark.parametrize("shape", [(1, 2), (7, 16), (64, 64), (3, 1)])
def test_layernorm_forward_backward_agree(rng, shape):
    z = rng.standard_normal(shape) * 3
    gain, offset = rng.standard_normal(shape[1]), rng.standard_normal(shape[1])
    a = kernels._compiled.layernorm_relu_forward(z, gain, offset, 1e-5)
    b = _fallback.layernorm_relu_forward(z, gain, offset, 1e-5)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)
    dout = rng.standard_normal(shape)
    ga = kernels._compiled.layernorm_relu_backward(dout, *a[:3], gain)
    gb = _fallback.layernorm_relu_backward(dout, *b[:3], gain)
    for x, y in zip(ga, gb):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)


def test_haversine_always_uses_numpy():
    assert kernels.haversine is _fallback.haversine


def test_env_var_forces_fallback():
    env = dict(os.environ, FEDFRAUD_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "import fedfraud; print(fedfraud.KERNEL_BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
