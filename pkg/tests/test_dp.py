import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedfraud import dp
from fedfraud.config import DEFAULT_ORDERS, PrivacySpec


def rdp_oracle(q, sigma, order):
    """Direct high-precision evaluation of the binomial sum."""
    mpmath.mp.dps = 60
    q, s = mpmath.mpf(q), mpmath.mpf(sigma)
    total = mpmath.fsum(
        mpmath.binomial(order, k) * (1 - q) ** (order - k) * q**k * mpmath.exp(mpmath.mpf(k * (k - 1)) / (2 * s * s))
        for k in range(order + 1)
    )
    return float(mpmath.log(total) / (order - 1))


# -- clipping and noise ------------------------------------------------------------

def test_clip_examples():
    out = dp.clip_per_sample(np.array([[2.0, 0.0], [0.5, 0.0], [3.0, 4.0]]), 1.0)
    assert np.allclose(out, [[1.0, 0.0], [0.5, 0.0], [0.6, 0.8]], atol=1e-15)


def test_clip_zero_gradient_untouched():
    assert not dp.clip_per_sample(np.zeros((2, 3)), 1.0).any()


def test_clip_joint_norm_over_mapping():
    g = {"a": np.array([[3.0]]), "b": np.array([[[4.0]]])}
    out = dp.clip_per_sample(g, 1.0)
    assert out["a"][0, 0] == pytest.approx(0.6) and out["b"][0, 0, 0] == pytest.approx(0.8)


def test_clip_rejects_nonpositive_bound():
    with pytest.raises(ValueError):
        dp.clip_per_sample(np.ones((1, 2)), 0.0)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)),
       st.floats(1e-3, 1e3))
def test_clip_bound_property(g, c):
    out = dp.clip_per_sample(g, c)
    norms = np.linalg.norm(out, axis=1)
    assert norms.max() <= c + 1e-12 * max(1.0, c)
    small = np.linalg.norm(g, axis=1) <= c
    assert np.array_equal(out[small], g[small])


def test_privatize_noiseless_is_clipped_mean(rng):
    g = dp.clip_per_sample(rng.standard_normal((5, 3)), 1.0)
    out = dp.privatize_batch(g, 1.0, 0.0, 5, rng)
    assert np.allclose(out, g.mean(axis=0), atol=1e-15)


def test_privatize_single_sample_no_clip(rng):
    g = np.array([[0.2, -0.1]])
    out = dp.privatize_batch(dp.clip_per_sample(g, 100.0), 100.0, 1e-9, 1, rng)
    assert np.allclose(out, g[0], atol=1e-5)


def test_privatize_noise_scale():
    rng = np.random.default_rng(5)
    sigma, c, b = 1.3, 0.7, 16
    g = np.zeros((b, 100_000))
    out = dp.privatize_batch(g, c, sigma, b, rng)
    assert abs(out.std() / (sigma * c / b) - 1) < 0.02


def test_privatize_empty_batch(rng):
    out = dp.privatize_batch({"w": np.zeros((0, 3))}, 1.0, 1.0, 4.0, rng)
    assert out["w"].shape == (3,)


# -- RDP accountant --------------------------------------------------------------------

def test_rdp_no_sampling_is_zero():
    assert all(dp.rdp_subsampled_gaussian(0.0, 1.0, a) == 0.0 for a in (2, 10, 256))


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0, 7.0])
@pytest.mark.parametrize("order", [2, 3, 8, 32, 64, 128, 256])
def test_rdp_full_batch_is_gaussian(sigma, order):
    assert abs(dp.rdp_subsampled_gaussian(1.0, sigma, order) - order / (2 * sigma**2)) <= 1e-12 * max(1, order / (2 * sigma**2))


def test_rdp_q1_sigma1_order2():
    assert abs(dp.rdp_subsampled_gaussian(1.0, 1.0, 2) - 1.0) <= 1e-12


def test_rdp_amplified_order2_closed_form():
    # order 2: the sum collapses to 1 + q^2 (exp(1/sigma^2) - 1)
    v = dp.rdp_subsampled_gaussian(0.01, 1.0, 2)
    assert v == pytest.approx(math.log1p(1e-4 * (math.e - 1)), rel=1e-12)
    assert v < 1.0


@pytest.mark.parametrize("q,sigma", [(0.01, 1.0), (0.003, 0.8), (0.2, 2.0), (0.05, 0.6), (0.5, 5.0)])
@pytest.mark.parametrize("order", [2, 5, 16, 40, 64])
def test_rdp_matches_high_precision_oracle(q, sigma, order):
    assert dp.rdp_subsampled_gaussian(q, sigma, order) == pytest.approx(rdp_oracle(q, sigma, order), rel=1e-9)


def test_rdp_zero_sigma_infinite():
    assert dp.rdp_subsampled_gaussian(0.1, 0.0, 4) == math.inf


def test_rdp_rejects_bad_inputs():
    with pytest.raises(ValueError):
        dp.rdp_subsampled_gaussian(1.5, 1.0, 2)
    with pytest.raises(ValueError):
        dp.rdp_subsampled_gaussian(0.5, 1.0, 1)


def test_rdp_to_epsilon_single_order():
    eps, order = dp.rdp_to_epsilon([1.0], [2], 1e-5)
    assert eps == pytest.approx(12.512925464970229, abs=1e-12) and order == 2


def test_rdp_to_epsilon_zero_mechanism():
    eps, order = dp.rdp_to_epsilon(np.zeros(len(DEFAULT_ORDERS)), DEFAULT_ORDERS, 1e-5)
    assert order == 256 and eps == pytest.approx(math.log(1e5) / 255)


def test_accountant_monotonicity_grid():
    qs = [0.001, 0.01, 0.05, 0.2, 1.0]
    sigmas = [0.6, 1.0, 2.0, 4.0]
    steps = [1, 10, 100, 1000]
    eps = np.array([[[dp.epsilon_for(q, s, t, 1e-5) for t in steps] for s in sigmas] for q in qs])
    assert (np.diff(eps, axis=2) >= 0).all()  # steps
    assert (np.diff(eps, axis=0) >= 0).all()  # q
    assert (np.diff(eps, axis=1) <= 0).all()  # sigma
    rdp = np.array([[dp.rdp_subsampled_gaussian(q, s, 8) for s in sigmas] for q in qs])
    assert (np.diff(rdp, axis=0) >= 0).all() and (np.diff(rdp, axis=1) <= 0).all()


@pytest.mark.parametrize("q", [0.001, 0.01, 0.1, 0.5, 0.9])
def test_amplification(q):
    assert dp.epsilon_for(q, 1.0, 1000, 1e-5) < dp.epsilon_for(1.0, 1.0, 1000, 1e-5)


def test_doubling_steps_never_decreases_epsilon():
    for t in (1, 5, 50, 500):
        assert dp.epsilon_for(0.02, 1.1, 2 * t, 1e-5) >= dp.epsilon_for(0.02, 1.1, t, 1e-5)


# -- calibration ---------------------------------------------------------------------

@pytest.mark.parametrize("target", [1.0, 10.0, 50.0])
def test_calibration_self_consistent(target):
    spec = PrivacySpec(target, sampling_rate=0.01, total_steps=2000)
    sigma = dp.calibrate_noise(spec)
    eps = dp.epsilon_for(0.01, sigma, 2000, 1e-5)
    assert eps <= target
    # and not needlessly noisy: 0.2% less noise misses the target
    assert dp.epsilon_for(0.01, sigma * 0.998, 2000, 1e-5) > target


def test_calibration_tighter_target_needs_more_noise():
    s1 = dp.calibrate_noise(PrivacySpec(1.0, sampling_rate=0.01, total_steps=1000))
    s10 = dp.calibrate_noise(PrivacySpec(10.0, sampling_rate=0.01, total_steps=1000))
    assert s1 > s10


def test_calibration_infeasible():
    with pytest.raises(dp.InfeasiblePrivacyTarget):
        dp.calibrate_noise(PrivacySpec(1e-4, sampling_rate=1.0, total_steps=10**6), sigma_bounds=(0.05, 2.0))


def test_resolve_spec_fills_rate_and_steps():
    spec = dp.resolve_spec(PrivacySpec(5.0), n_samples=12_000, batch_size=64, steps_per_epoch=188,
                           epochs_per_round=1, rounds=50)
    assert spec.sampling_rate == pytest.approx(64 / 12_000) and spec.total_steps == 9400


def test_ledger_accumulates():
    spec = PrivacySpec(10.0, sampling_rate=0.01, total_steps=500)
    ledger = dp.PrivacyLedger.for_spec(spec)
    eps = [ledger.epsilon()]
    for _ in range(5):
        ledger.step(100)
        eps.append(ledger.epsilon())
    assert all(a <= b for a, b in zip(eps, eps[1:]))
    assert ledger.steps_taken == 500 and eps[-1] <= 10.0
    snap = ledger.snapshot()
    assert snap["steps"] == 500 and snap["epsilon"] == eps[-1]
    assert np.allclose(ledger.rdp_accumulated, dp.compute_rdp(0.01, ledger.sigma, 500))
