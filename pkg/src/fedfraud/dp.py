"""Sample-level DP-SGD: per-example clipping, Gaussian noise, RDP accounting.

Accounting uses the integer-order bound for the Poisson-subsampled Gaussian
mechanism,

    eps(a) = 1/(a-1) * ln sum_{k=0..a} C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 sigma^2)),

composed additively over steps and converted to (eps, delta) with
``min_a rdp(a) + ln(1/delta) / (a-1)``.
"""
from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .config import DEFAULT_ORDERS, PrivacySpec


class InfeasiblePrivacyTarget(ValueError):
    pass


def _per_sample_sq_norms(grads) -> np.ndarray:
    if isinstance(grads, Mapping):
        return sum(np.square(g).reshape(g.shape[0], -1).sum(axis=1) for g in grads.values())
    g = np.asarray(grads, dtype=np.float64)
    return np.square(g).reshape(g.shape[0], -1).sum(axis=1)


def clip_factors(grads, max_norm: float) -> np.ndarray:
    """Per-sample ``min(1, C / ||g_i||)`` over the joint norm of all tensors."""
    if not max_norm > 0:
        raise ValueError("clipping bound must be positive")
    norms = np.sqrt(_per_sample_sq_norms(grads))
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, max_norm / norms)


def clip_per_sample(grads, max_norm: float):
    """Scale each sample's gradient (leading axis) to l2 norm at most ``max_norm``.

    ``grads`` is an array ``(n, ...)`` or a mapping of such arrays sharing the
    sample axis; the norm is taken jointly across the mapping.
    """
    f = clip_factors(grads, max_norm)

    def scale(g):
        return g * f.reshape((-1,) + (1,) * (g.ndim - 1))

    if isinstance(grads, Mapping):
        return {k: scale(g) for k, g in grads.items()}
    return scale(np.asarray(grads, dtype=np.float64))


def privatize_batch(clipped, max_norm: float, sigma: float, batch_size: float, rng: np.random.Generator):
    """Noisy mean: ``(sum_i g_i + N(0, sigma^2 C^2 I)) / batch_size``.

    Noise is added to the sum, so the per-coordinate sd on the mean is
    ``sigma * C / batch_size``. Under Poisson sampling pass the expected
    batch size.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    std = sigma * max_norm

    def one(g):
        s = g.sum(axis=0)
        if std > 0:
            s = s + rng.normal(0.0, std, s.shape)
        return s / batch_size

    if isinstance(clipped, Mapping):
        return {k: one(g) for k, g in clipped.items()}
    return one(np.asarray(clipped, dtype=np.float64))


def rdp_subsampled_gaussian(q: float, sigma: float, order: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at an integer order >= 2."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if int(order) != order or order < 2:
        raise ValueError("order must be an integer >= 2")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    a = int(order)
    k = np.arange(a + 1, dtype=np.float64)
    log_binom = gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)
    with np.errstate(divide="ignore"):
        log_q = math.log(q)
        log_1mq = math.log1p(-q) if q < 1.0 else -math.inf
    # (a - k) * log(1 - q) with 0 * -inf taken as 0
    n_out = a - k
    tail = np.zeros_like(k)
    tail[n_out > 0] = n_out[n_out > 0] * log_1mq
    terms = log_binom + k * log_q + tail + k * (k - 1) / (2.0 * sigma**2)
    return float(logsumexp(terms) / (a - 1))


def compute_rdp(q: float, sigma: float, steps: int, orders=DEFAULT_ORDERS) -> np.ndarray:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return np.zeros(len(orders))
    return np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders]) * steps


def rdp_to_epsilon(rdp, orders, delta: float) -> tuple[float, float]:
    """Classical conversion: ``min_a rdp(a) + ln(1/delta)/(a-1)``; returns (eps, best order)."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders.size == 0 or orders.shape != rdp.shape:
        raise ValueError("orders and rdp must be non-empty and of equal length")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return float(eps[i]), float(orders[i])


def epsilon_for(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    return rdp_to_epsilon(compute_rdp(q, sigma, steps, orders), orders, delta)[0]


def calibrate_noise(spec: PrivacySpec, sigma_bounds=(0.05, 200.0), rel_tol: float = 1e-3) -> float:
    """Smallest noise multiplier (to ``rel_tol``) whose accounted epsilon meets the target."""
    if spec.sampling_rate is None or spec.total_steps is None:
        raise ValueError("calibration needs sampling_rate and total_steps")
    q, steps = spec.sampling_rate, spec.total_steps

    def eps(sigma):
        return epsilon_for(q, sigma, steps, spec.target_delta, spec.orders)

    lo, hi = sigma_bounds
    if eps(hi) > spec.target_epsilon:
        raise InfeasiblePrivacyTarget(
            f"epsilon={spec.target_epsilon} not reachable with sigma <= {hi} (q={q}, steps={steps})"
        )
    if eps(lo) <= spec.target_epsilon:
        return float(lo)
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= spec.target_epsilon:
            hi = mid
        else:
            lo = mid
    return float(hi)


def resolve_spec(spec: PrivacySpec, n_samples: int, batch_size: int, steps_per_epoch: int,
                 epochs_per_round: int, rounds: int) -> PrivacySpec:
    """Fill in sampling rate and total step count for one client's run."""
    q = spec.sampling_rate if spec.sampling_rate is not None else min(1.0, batch_size / n_samples)
    steps = spec.total_steps if spec.total_steps is not None else rounds * epochs_per_round * steps_per_epoch
    return dataclasses.replace(spec, sampling_rate=q, total_steps=steps)


@dataclass
class PrivacyLedger:
    """Running RDP budget of one client across all federated rounds."""

    sigma: float
    sampling_rate: float
    max_grad_norm: float
    delta: float
    orders: tuple = DEFAULT_ORDERS
    steps_taken: int = 0
    _per_step: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.orders = tuple(self.orders)
        self._per_step = np.array([rdp_subsampled_gaussian(self.sampling_rate, self.sigma, a) for a in self.orders])

    @classmethod
    def for_spec(cls, spec: PrivacySpec) -> "PrivacyLedger":
        sigma = calibrate_noise(spec)
        return cls(sigma, spec.sampling_rate, spec.max_grad_norm, spec.target_delta, spec.orders)

    @property
    def rdp_accumulated(self) -> np.ndarray:
        return self._per_step * self.steps_taken

    def step(self, n: int = 1) -> None:
        self.steps_taken += n

    def epsilon(self, delta: float | None = None) -> float:
        if self.steps_taken == 0:
            return rdp_to_epsilon(np.zeros(len(self.orders)), self.orders, delta or self.delta)[0]
        return rdp_to_epsilon(self.rdp_accumulated, self.orders, delta or self.delta)[0]

    def snapshot(self) -> dict:
        return {
            "sigma": self.sigma,
            "sampling_rate": self.sampling_rate,
            "max_grad_norm": self.max_grad_norm,
            "steps": self.steps_taken,
            "delta": self.delta,
            "epsilon": self.epsilon(),
        }
