"""Feed-forward fraud classifier with hand-written backprop.

Architecture: ``in -> [dense -> LayerNorm -> ReLU] x 3 -> dense -> 2 logits``
with hidden widths 64, 32, 16. Dense weights are stored ``(fan_in, fan_out)``
so a layer computes ``a @ W + b``.

Parameters travel as :class:`ModelParameters`, an ordered name -> array map
with value semantics. The same tensor codec is used for checkpoints and for
the wire protocol.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .config import TrainConfig

HIDDEN_SIZES = (64, 32, 16)
N_CLASSES = 2
LN_EPS = 1e-5

TENSOR_MAGIC = b"FFTN"
CHECKPOINT_MAGIC = b"FFCK"
CODEC_VERSION = 1


class CacheReuseError(RuntimeError):
    pass


class ModelParameters(Mapping):
    """Immutable-by-convention snapshot of all network tensors."""

    __slots__ = ("_t",)

    def __init__(self, tensors, copy: bool = True):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._t = {k: (np.array(v, dtype=np.float64) if copy else v) for k, v in items}

    def __getitem__(self, key):
        return self._t[key]

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._t.items())
        return f"ModelParameters({shapes})"

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self._t if k.endswith(".weight"))

    @property
    def input_dim(self) -> int:
        return self._t["dense1.weight"].shape[0]

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(self._t[f"dense{i}.weight"].shape[1] for i in range(1, self.n_layers))

    def num_params(self) -> int:
        return int(sum(v.size for v in self._t.values()))

    def copy(self) -> "ModelParameters":
        return ModelParameters(self._t)

    def map(self, fn) -> "ModelParameters":
        return ModelParameters({k: fn(v) for k, v in self._t.items()}, copy=False)

    def zip_map(self, other: Mapping, fn) -> "ModelParameters":
        check_same_shapes(self, other)
        return ModelParameters({k: fn(v, other[k]) for k, v in self._t.items()}, copy=False)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._t.values()])

    def from_flat(self, vec: np.ndarray) -> "ModelParameters":
        out, i = {}, 0
        for k, v in self._t.items():
            out[k] = np.asarray(vec[i:i + v.size], dtype=np.float64).reshape(v.shape).copy()
            i += v.size
        if i != len(vec):
            raise ValueError("flat vector length does not match parameter count")
        return ModelParameters(out, copy=False)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._t.values())

    def to_bytes(self) -> bytes:
        return encode_tensors(self._t)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParameters":
        return cls(decode_tensors(data), copy=False)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def equals(self, other: Mapping) -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


def check_same_shapes(a: Mapping, b: Mapping) -> None:
    if list(a) != list(b) or any(a[k].shape != b[k].shape for k in a):
        raise ValueError("parameter shapes do not match")


# -- tensor codec --------------------------------------------------------------

def encode_tensors(tensors: Mapping) -> bytes:
    """Little-endian float64 tensors with a name/shape header per tensor."""
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<BI", CODEC_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode_tensors(data: bytes) -> dict:
    view = memoryview(data)
    if bytes(view[:4]) != TENSOR_MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", view, 4)
    except struct.error as exc:
        raise ValueError("truncated tensor blob") from exc
    if version != CODEC_VERSION:
        raise ValueError(f"unsupported tensor codec version {version}")
    pos = 9
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(view):
                raise ValueError("truncated tensor blob")
            out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
            pos += nbytes
    except struct.error as exc:
        raise ValueError("truncated tensor blob") from exc
    if pos != len(view):
        raise ValueError("trailing bytes after tensor blob")
    return out


def save_checkpoint(path, params: ModelParameters, meta: dict) -> None:
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CODEC_VERSION, len(header)))
        fh.write(header)
        fh.write(params.to_bytes())


def load_checkpoint(path) -> tuple[ModelParameters, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != CODEC_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[9:9 + hlen])
    return ModelParameters.from_bytes(data[9 + hlen:]), meta


# -- model -----------------------------------------------------------------------

def init_model(input_dim: int, seed: int, hidden_sizes=HIDDEN_SIZES, n_out: int = N_CLASSES) -> ModelParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity LayerNorm."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = (input_dim, *hidden_sizes, n_out)
    t = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        bound = 1.0 / np.sqrt(fan_in)
        t[f"dense{i}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        t[f"dense{i}.bias"] = np.zeros(fan_out)
        if i < len(sizes) - 1:
            t[f"norm{i}.gain"] = np.ones(fan_out)
            t[f"norm{i}.offset"] = np.zeros(fan_out)
    return ModelParameters(t, copy=False)


@dataclass
class ForwardCache:
    params: ModelParameters
    inputs: list  # input to each dense layer
    norm: list  # (out, xhat, inv_std) per hidden layer
    consumed: bool = field(default=False)


def forward(params: ModelParameters, x: np.ndarray, eps: float = LN_EPS) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected input of shape (n, {params.input_dim}), got {x.shape}")
    if np.isnan(x).any():
        raise ValueError("NaN in model input")
    n_layers = params.n_layers
    inputs, norm = [], []
    a = x
    for i in range(1, n_layers):
        inputs.append(a)
        z = a @ params[f"dense{i}.weight"] + params[f"dense{i}.bias"]
        out, xhat, inv_std = kernels.layernorm_relu_forward(z, params[f"norm{i}.gain"], params[f"norm{i}.offset"], eps)
        norm.append((out, xhat, inv_std))
        a = out
    inputs.append(a)
    logits = a @ params[f"dense{n_layers}.weight"] + params[f"dense{n_layers}.bias"]
    return logits, ForwardCache(params, inputs, norm)


def predict_logits(params: ModelParameters, x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    return forward(params, x, eps)[0]


def backward(cache: ForwardCache, dlogits: np.ndarray, per_sample: bool = False) -> tuple[ModelParameters, np.ndarray]:
    """Gradients of ``sum(dlogits * logits)`` w.r.t. every parameter and the input.

    With ``per_sample=True`` each parameter gradient keeps a leading batch axis
    (needed for per-example clipping); otherwise it is summed over the batch.
    """
    if cache.consumed:
        raise CacheReuseError("forward cache already used by a backward pass")
    cache.consumed = True
    params = cache.params
    n_layers = params.n_layers
    grads = {}
    delta = np.asarray(dlogits, dtype=np.float64)
    for i in range(n_layers, 0, -1):
        a = cache.inputs[i - 1]
        if per_sample:
            grads[f"dense{i}.weight"] = a[:, :, None] * delta[:, None, :]
            grads[f"dense{i}.bias"] = delta
        else:
            grads[f"dense{i}.weight"] = a.T @ delta
            grads[f"dense{i}.bias"] = delta.sum(axis=0)
        d_a = delta @ params[f"dense{i}.weight"].T
        if i == 1:
            break
        out, xhat, inv_std = cache.norm[i - 2]
        delta, dgain, doffset = kernels.layernorm_relu_backward(d_a, out, xhat, inv_std, params[f"norm{i - 1}.gain"])
        if per_sample:
            grads[f"norm{i - 1}.gain"] = dgain
            grads[f"norm{i - 1}.offset"] = doffset
        else:
            grads[f"norm{i - 1}.gain"] = dgain.sum(axis=0)
            grads[f"norm{i - 1}.offset"] = doffset.sum(axis=0)
    ordered = {k: grads[k] for k in params}
    return ModelParameters(ordered, copy=False), d_a


# -- loss --------------------------------------------------------------------------

def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def focal_loss_terms(logits: np.ndarray, labels: np.ndarray, gamma: float, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``-alpha_t (1 - p_t)^gamma ln p_t`` and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    p = np.exp(logp)
    rows = np.arange(n)
    logp_t = logp[rows, labels]
    p_t = p[rows, labels]
    alpha_t = np.asarray(alpha, dtype=np.float64)[labels]
    one_minus = np.clip(1.0 - p_t, 0.0, None)
    mod = one_minus ** gamma
    loss = -alpha_t * mod * logp_t
    # d loss / d z_j = -alpha_t [ (1-p_t)^g - g (1-p_t)^(g-1) p_t ln p_t ] (delta_jy - p_j)
    if gamma == 0:
        dmod = np.zeros(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1.0), 0.0)
    coef = -alpha_t * (mod - dmod * p_t * logp_t)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    dlogits = coef[:, None] * (onehot - p)
    return loss, dlogits


def focal_loss(logits: np.ndarray, labels: np.ndarray, gamma: float = 2.0, alpha=(0.5, 0.5)) -> tuple[float, np.ndarray]:
    """Mean focal loss over the batch and its gradient w.r.t. the logits."""
    loss, dlogits = focal_loss_terms(logits, labels, gamma, alpha)
    n = max(len(loss), 1)
    return float(loss.sum() / n), dlogits / n


def inverse_frequency_alpha(labels: np.ndarray) -> tuple[float, float]:
    """Class weights proportional to 1/count, normalized to sum to 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=2).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    inv = 1.0 / counts
    inv /= inv.sum()
    return float(inv[0]), float(inv[1])


# -- optimizers --------------------------------------------------------------------

def init_optimizer_state(params: ModelParameters) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def optimizer_step(params: ModelParameters, grads: Mapping, state: dict | None,
                   config: TrainConfig) -> tuple[ModelParameters, dict]:
    """One SGD or Adam (bias-corrected) update; returns new params and state."""
    check_same_shapes(params, grads)
    lr = config.learning_rate
    if config.optimizer == "sgd":
        return ModelParameters({k: p - lr * grads[k] for k, p in params.items()}, copy=False), state
    if state is None:
        state = init_optimizer_state(params)
    b1, b2 = config.adam_betas
    t = state["t"] + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    m_new, v_new, out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * (g * g)
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        m_new[k] = m
        v_new[k] = v
    return ModelParameters(out, copy=False), {"t": t, "m": m_new, "v": v_new}
