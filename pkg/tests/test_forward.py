import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rfdm.forward import (
    Formulation, forward_frame, forward_mean_cov, forward_residual, residual_mean, temporal_residual,
)
from rfdm.schedule import NoiseSchedule, eval_schedule

SCHED = NoiseSchedule()
EXACT = NoiseSchedule(s_min=0.0, s_max=1.0)


def s_for(alpha):
    """Diffusion time with the given alpha under the cosine schedule."""
    return 2 / np.pi * np.arccos(alpha)


def test_clean_and_noise_limits(rng):
    y0, eps = rng.standard_normal((2, 4, 4, 3))
    assert np.allclose(forward_frame(y0, 0.0, eps, EXACT).y_s, y0)
    assert np.allclose(forward_frame(y0, 1.0, eps, EXACT).y_s, eps, atol=1e-12)
    prev = rng.standard_normal((4, 4, 3))
    assert np.allclose(forward_residual(y0, prev, 1.0, eps, EXACT).y_s, prev + eps, atol=1e-12)


def test_hand_values():
    s = s_for(0.8)  # alpha = 0.8, sigma = 0.6
    a, sg, _ = eval_schedule(SCHED, s)
    assert (a, sg) == pytest.approx((0.8, 0.6))
    assert forward_frame(np.array([1.0]), s, np.array([0.1]), SCHED).y_s[0] == pytest.approx(0.86)
    out = forward_residual(np.array([1.0]), np.array([0.5]), s, np.array([0.1]), SCHED)
    assert out.y_s[0] == pytest.approx(1.16)


def test_residual_with_zero_prev_is_bitwise_frame(rng):
    y0 = rng.standard_normal((8, 8, 3)).astype(np.float32)
    eps = rng.standard_normal((8, 8, 3)).astype(np.float32)
    for s in rng.uniform(0, 1, 10):
        a = forward_frame(y0, s, eps, SCHED).y_s
        b = forward_residual(y0, np.zeros_like(y0), s, eps, SCHED).y_s
        assert a.tobytes() == b.tobytes()


def test_torch_batch_with_per_sample_s():
    y0 = torch.randn(3, 3, 4, 4)
    prev = torch.randn(3, 3, 4, 4)
    eps = torch.randn(3, 3, 4, 4)
    s = np.array([0.1, 0.5, 0.9])
    out = forward_residual(y0, prev, s, eps, SCHED).y_s
    for i in range(3):
        ref = forward_residual(y0[i].numpy(), prev[i].numpy(), s[i], eps[i].numpy(), SCHED).y_s
        assert np.allclose(out[i].numpy(), ref, atol=1e-6)


def test_dim_mismatch():
    with pytest.raises(ValueError):
        forward_frame(np.zeros((2, 2)), 0.5, np.zeros((3, 2)), SCHED)
    with pytest.raises(ValueError):
        forward_residual(np.zeros((2, 2)), np.zeros((2, 3)), 0.5, np.zeros((2, 2)), SCHED)


def test_mean_expressions_agree(rng):
    for _ in range(20):
        y0, prev = rng.standard_normal((2, 5, 5, 3))
        s = rng.uniform(0, 1)
        mean, var = forward_mean_cov(y0, prev, s, SCHED, Formulation.RESIDUAL_FLOW)
        assert np.max(np.abs(mean - residual_mean(y0, prev, s, SCHED))) < 1e-9
        assert var == pytest.approx(eval_schedule(SCHED, s)[1] ** 2)


def test_zero_residual_mean_is_gamma_y0(rng):
    y0 = rng.standard_normal((4, 4, 3))
    assert np.allclose(residual_mean(y0, y0, 0.3, SCHED), (np.cos(0.15 * np.pi) + np.sin(0.15 * np.pi)) * y0)
    assert not temporal_residual(y0, y0).any()


def test_frame_prediction_mean(rng):
    y0, prev = rng.standard_normal((2, 4))
    mean, var = forward_mean_cov(y0, prev, 0.4, SCHED, Formulation.FRAME_PREDICTION)
    a, sg, _ = eval_schedule(SCHED, 0.4)
    assert np.allclose(mean, a * y0) and var == pytest.approx(sg**2)


def test_monte_carlo_moments(rng):
    n = 100_000
    for _ in range(5):
        y0, prev = rng.standard_normal(2)
        s = rng.uniform(0.05, 0.95)
        eps = rng.standard_normal(n)
        ys = forward_residual(np.full(n, y0), np.full(n, prev), s, eps, SCHED).y_s
        mean, var = forward_mean_cov(y0, prev, s, SCHED, Formulation.RESIDUAL_FLOW)
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert abs(ys.mean() - mean) < 4 * se_mean
        assert abs(ys.var(ddof=1) - var) < 4 * se_var


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1), st.floats(-4, 4))
def test_linearity(y0, prev, eps, s, c):
    base = forward_residual(np.array([y0]), np.array([prev]), s, np.array([eps]), SCHED).y_s
    scaled = forward_residual(np.array([c * y0]), np.array([c * prev]), s, np.array([c * eps]), SCHED).y_s
    assert scaled[0] == pytest.approx(c * base[0], abs=1e-9)
