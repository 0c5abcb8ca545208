"""Diffusion-core math against brute-force and closed-form oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainprog.diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    SamplerConfig,
    build_schedule,
    ddim_sample,
    forward_marginal,
    forward_step,
    noise_loss,
    predict_x0,
    timestep_subsequence,
)

PAPER_CFG = DiffusionConfig(T=1000, beta_start=0.0015, beta_end=0.0205)


# --- schedule -------------------------------------------------------------


def test_schedule_endpoints_exact():
    sched = build_schedule(PAPER_CFG)
    assert sched.betas[1] == 0.0015
    assert sched.betas[1000] == 0.0205


def test_schedule_t2_endpoints_forced():
    sched = build_schedule(DiffusionConfig(T=2, beta_start=0.0015, beta_end=0.0205))
    assert list(sched.betas[1:]) == [0.0015, 0.0205]


def test_alpha_bar_matches_direct_product():
    sched = build_schedule(PAPER_CFG)
    # independent oracle: plain running product of (1 - beta_t)
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - sched.betas[t]
    assert abs(sched.alpha_bars[1000] - prod) < 1e-12


def test_alpha_bar_recurrence_exact():
    sched = build_schedule(PAPER_CFG)
    for t in range(1, sched.T + 1):
        assert sched.alpha_bars[t] == sched.alpha_bars[t - 1] * sched.alphas[t]


def test_alpha_bars_strictly_decreasing_and_bounded():
    sched = build_schedule(PAPER_CFG)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all(sched.alpha_bars > 0) and sched.alpha_bars[0] == 1.0


def test_linear_schedule_kind():
    sched = build_schedule(DiffusionConfig(T=10, beta_start=0.1, beta_end=0.2, schedule_kind="linear"))
    assert np.allclose(sched.betas[1:], np.linspace(0.1, 0.2, 10))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"T": 1},
        {"beta_start": 0.0},
        {"beta_end": 1.0},
        {"beta_start": 0.5, "beta_end": 0.1},
    ],
)
def test_bad_configs_rejected(kwargs):
    with pytest.raises(ValueError):
        DiffusionConfig(**{"T": 100, "beta_start": 0.001, "beta_end": 0.02, **kwargs})


def test_violated_schedule_rejected_at_construction():
    with pytest.raises(ValueError):
        NoiseSchedule(
            betas=np.array([0.0, 0.1, 0.1]),
            alphas=np.array([1.0, 0.9, 0.9]),
            alpha_bars=np.array([1.0, 0.9, 0.95]),  # not decreasing
        )


# --- forward process ------------------------------------------------------


def _small_sched():
    return build_schedule(DiffusionConfig(T=40, beta_start=0.02, beta_end=0.25, schedule_kind="linear"))


def test_forward_marginal_t0_identity():
    sched = _small_sched()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((2, 3, 3, 3))
    eps = rng.standard_normal(x0.shape)
    assert np.array_equal(forward_marginal(x0, 0, eps, sched), x0)


def test_forward_marginal_deterministic_branch():
    sched = _small_sched()
    x0 = np.ones((2, 2, 2, 2))
    out = forward_marginal(x0, 7, np.zeros_like(x0), sched)
    assert np.allclose(out, math.sqrt(sched.alpha_bars[7]) * x0)


def test_forward_marginal_matches_iterated_kernel_monte_carlo():
    """Iterating q(x_t | x_{t-1}) t times must match the closed form in
    mean and variance within 3 Monte-Carlo standard errors."""
    sched = _small_sched()
    t, n = 25, 10_000
    x0 = np.array([1.5, -0.7])
    rng = np.random.default_rng(42)

    samples = np.empty((n, 2))
    for i in range(n):
        x = x0
        for step in range(1, t + 1):
            x = forward_step(x, step, rng.standard_normal(2), sched)
        samples[i] = x

    ab = sched.alpha_bars[t]
    want_mean = math.sqrt(ab) * x0
    want_var = 1.0 - ab
    got_mean = samples.mean(axis=0)
    got_var = samples.var(axis=0, ddof=1)
    se_mean = samples.std(axis=0, ddof=1) / math.sqrt(n)
    se_var = got_var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(got_mean - want_mean) <= 3 * se_mean)
    assert np.all(np.abs(got_var - want_var) <= 3 * se_var)


def test_forward_step_trivials():
    sched = _small_sched()
    x = np.full((2, 2, 2, 2), 3.0)
    eps = np.zeros_like(x)
    out = forward_step(x, 1, eps, sched)
    assert np.allclose(out, math.sqrt(1 - sched.betas[1]) * x)
    e = np.random.default_rng(1).standard_normal(x.shape)
    out2 = forward_step(np.zeros_like(x), 5, e, sched)
    assert np.allclose(out2, math.sqrt(sched.betas[5]) * e)


def test_forward_step_variance_oracle():
    sched = _small_sched()
    t, n = 12, 10_000
    rng = np.random.default_rng(3)
    x_prev = rng.standard_normal(n) * 2.0  # Var ~ 4
    out = np.array([forward_step(np.array([xp]), t, rng.standard_normal(1), sched)[0] for xp in x_prev])
    b = sched.betas[t]
    want = (1 - b) * x_prev.var(ddof=1) + b
    got = out.var(ddof=1)
    se = want * math.sqrt(2.0 / (n - 1)) * 2.0
    assert abs(got - want) <= 3 * se


def test_forward_shape_mismatch():
    sched = _small_sched()
    with pytest.raises(ValueError, match="shape mismatch"):
        forward_marginal(np.zeros((1, 2, 2, 2)), 1, np.zeros((1, 2, 2, 3)), sched)


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-3, 3, allow_nan=False),
    b=st.floats(-3, 3, allow_nan=False),
    t=st.integers(0, 40),
)
def test_forward_marginal_linear_in_both_args(a, b, t):
    sched = _small_sched()
    rng = np.random.default_rng(7)
    x0, x1 = rng.standard_normal((2, 2, 2, 2, 2))
    e0, e1 = rng.standard_normal((2, 2, 2, 2, 2))
    lhs = forward_marginal(a * x0 + b * x1, t, a * e0 + b * e1, sched)
    rhs = a * forward_marginal(x0, t, e0, sched) + b * forward_marginal(x1, t, e1, sched)
    assert np.allclose(lhs, rhs, atol=1e-10)


# --- loss -----------------------------------------------------------------


def test_noise_loss_trivials():
    x = np.random.default_rng(0).standard_normal((3, 4, 4, 4))
    assert noise_loss(x, x) == 0.0
    assert noise_loss(np.ones((2, 2, 2, 2)), np.zeros((2, 2, 2, 2))) == 1.0


def test_noise_loss_brute_force_oracle():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 4, 5, 2))
    b = rng.standard_normal(a.shape)
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (b[idx] - a[idx]) ** 2
    assert abs(noise_loss(a, b) - total / a.size) < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_noise_loss_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(a.shape)
    assert noise_loss(a, b) >= 0.0
    assert noise_loss(a, a.copy()) <= 1e-15


# --- x0 prediction --------------------------------------------------------


def test_predict_x0_inverts_forward_marginal():
    sched = _small_sched()
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((3, 4, 4, 4))
    eps = rng.standard_normal(x0.shape)
    for t in (1, 13, 40):
        x_t = forward_marginal(x0, t, eps, sched)
        assert np.max(np.abs(predict_x0(x_t, t, eps, sched) - x0)) < 1e-10


def test_predict_x0_t0_identity():
    sched = _small_sched()
    x = np.random.default_rng(1).standard_normal((1, 2, 2, 2))
    assert np.array_equal(predict_x0(x, 0, np.zeros_like(x), sched), x)


def test_predict_x0_formula_oracle():
    sched = _small_sched()
    rng = np.random.default_rng(11)
    x_t = rng.standard_normal((2, 3, 3, 3))
    eps = rng.standard_normal(x_t.shape)
    t = 17
    ab = sched.alpha_bars[t]
    want = (x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    assert np.allclose(predict_x0(x_t, t, eps, sched), want, atol=1e-12)


# --- DDIM -----------------------------------------------------------------


def test_timestep_subsequence_shape():
    seq = timestep_subsequence(1000, 25)
    assert seq[0] == 1000 and seq[-1] == 1
    assert all(a > b for a, b in zip(seq, seq[1:]))
    assert timestep_subsequence(1000, 1) == [1]
    with pytest.raises(ValueError):
        timestep_subsequence(10, 11)


def test_ddim_deterministic_bitwise():
    sched = _small_sched()
    rng = np.random.default_rng(2)
    z_T = rng.standard_normal((2, 2, 2, 2))

    def denoiser(z, t, cond):
        return 0.3 * z + 0.01 * t

    a = ddim_sample(denoiser, z_T.copy(), None, sched, SamplerConfig(num_inference_steps=10), seed=0)
    b = ddim_sample(denoiser, z_T.copy(), None, sched, SamplerConfig(num_inference_steps=10), seed=0)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("steps", [1, 2, 5, 25])
def test_ddim_exact_noise_oracle_recovers_x0(steps):
    sched = _small_sched()
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 3, 3, 3))

    def oracle_denoiser(z, t, cond):
        ab = sched.alpha_bars[t]
        return (z - math.sqrt(ab) * x0) / math.sqrt(1 - ab)

    z_T = forward_marginal(x0, sched.T, rng.standard_normal(x0.shape), sched)
    out = ddim_sample(oracle_denoiser, z_T, None, sched, SamplerConfig(num_inference_steps=steps))
    assert np.max(np.abs(out - x0)) < 1e-6


def test_ddim_linear_denoiser_matches_scalar_recurrence():
    """eps_hat = c*z is scalar per component, so the whole trajectory has an
    independent closed recurrence we can follow step by step."""
    sched = build_schedule(PAPER_CFG)
    c = 0.42
    z_T = np.full((1, 2, 2, 2), 1.7, dtype=np.float64)

    out = ddim_sample(
        lambda z, t, cond: c * z, z_T, None, sched, SamplerConfig(num_inference_steps=25)
    )

    steps = timestep_subsequence(sched.T, 25)
    v = 1.7
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab_t, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t_prev]
        eps = c * v
        x0 = (v - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
        v = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
    assert np.max(np.abs(out - v)) < 1e-8


def test_ddim_eta_positive_reproducible_and_distinct():
    sched = _small_sched()
    z_T = np.random.default_rng(0).standard_normal((1, 2, 2, 2))

    def denoiser(z, t, cond):
        return 0.1 * z

    det = ddim_sample(denoiser, z_T, None, sched, SamplerConfig(5, eta=0.0), seed=1)
    s1 = ddim_sample(denoiser, z_T, None, sched, SamplerConfig(5, eta=1.0), seed=1)
    s2 = ddim_sample(denoiser, z_T, None, sched, SamplerConfig(5, eta=1.0), seed=1)
    s3 = ddim_sample(denoiser, z_T, None, sched, SamplerConfig(5, eta=1.0), seed=2)
    assert np.array_equal(s1, s2)
    assert not np.array_equal(s1, s3)
    assert not np.array_equal(det, s1)


def test_ddim_rejects_bad_denoiser_shape():
    sched = _small_sched()
    with pytest.raises(ValueError, match="shape"):
        ddim_sample(
            lambda z, t, cond: np.zeros((1, 1, 1, 1)),
            np.zeros((1, 2, 2, 2)),
            None,
            sched,
            SamplerConfig(num_inference_steps=2),
        )
