"""Pure-numpy reference kernels.

These define the semantics; the Cython module must agree with them to
floating-point tolerance.
"""
import numpy as np


def layernorm_relu_forward(z, gain, offset, eps):
    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = np.maximum(xhat * gain + offset, 0.0)
    return out, xhat, inv_std[:, 0]


def layernorm_relu_backward(dout, out, xhat, inv_std, gain):
    """Return ``(dz, dgain, doffset)``; the last two are per-sample (batch x H)."""
    dy = np.where(out > 0.0, dout, 0.0)
    dgain = dy * xhat
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dz = (dxhat - m1 - xhat * m2) * inv_std[:, None]
    return dz, dgain, dy


def haversine(lat1, lon1, lat2, lon2, radius):
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * radius * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))
