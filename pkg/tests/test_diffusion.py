from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpd.diffusion import (NoiseSchedule, forward_sample, forward_step, make_schedule,
                           predicted_noise, reverse_step, sample, sampling_timesteps)
from vpd.tensor import ShapeError
from vpd.volume import HypothesisPlanes, check_probability_volume, online_filter

PLANES = HypothesisPlanes.uniform(1.0, 6.0, 6)


def test_single_step_schedule():
    assert make_schedule(1, beta_start=0.5, beta_end=0.5).alpha_bar(1) == 0.5


def test_two_step_product():
    s = make_schedule(2, beta_start=0.1, beta_end=0.2)
    assert s.alpha_bar(2) == pytest.approx(0.72, rel=1e-12)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_default_schedules_nearly_destroy_signal(kind):
    s = make_schedule(1000, kind)
    assert s.alpha_bar(1000) < (1e-4 if kind == "linear" else 0.01)
    assert np.all(np.diff(s.alpha_bars) < 0)
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(s.alphas), rtol=1e-6)


@pytest.mark.parametrize("args", [(0,), (10, "linear", 0.0, 0.1), (10, "linear", 0.2, 0.1),
                                  (10, "linear", 0.1, 1.0), (10, "sigmoid")])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_schedule_rejects_alphas_outside_unit_interval():
    for a in ([1.0], [0.0], [0.5, 1.2]):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array(a))


def test_alpha_bar_zero_is_one():
    assert make_schedule(5).alpha_bar(0) == 1.0


def test_forward_sample_examples():
    s = NoiseSchedule(np.array([0.5, 0.5]))  # alpha_bar(2) = 0.25
    y0 = np.array([1.0])
    assert forward_sample(y0, 2, s, np.array([1.0]))[0] == pytest.approx(0.5 + np.sqrt(0.75), abs=1e-12)
    np.testing.assert_allclose(forward_sample(np.full(3, 2.0), 1, s, np.zeros(3)), np.sqrt(0.5) * 2.0)
    for t in (0, 3):
        with pytest.raises(ValueError):
            forward_sample(y0, t, s, y0)
    with pytest.raises(ShapeError):
        forward_sample(y0, 1, s, np.zeros(2))


def test_reverse_step_plug_in():
    s = NoiseSchedule(np.array([0.5, 0.5]))
    y_t = np.array([0.5 + np.sqrt(0.75)])
    out = reverse_step(y_t, 2, np.array([1.0]), s)
    assert out[0] == pytest.approx(np.sqrt(0.5) + np.sqrt(0.5), abs=1e-12)


def test_reverse_step_recovers_noise(rng):
    s = make_schedule(1000)
    y0 = rng.random((1, 4, 3, 3))
    noise = rng.standard_normal(y0.shape)
    for t in (1, 10, 500, 1000):
        y_t = forward_sample(y0, t, s, noise)
        np.testing.assert_allclose(predicted_noise(y_t, t, y0, s), noise, atol=1e-5)


def test_reverse_step_at_one_returns_estimate_exactly(rng):
    s = make_schedule(1000)
    y0_hat = rng.random((1, 4, 2, 2))
    np.testing.assert_array_equal(reverse_step(rng.standard_normal(y0_hat.shape), 1, y0_hat, s), y0_hat)


def test_reverse_step_errors(rng):
    s = make_schedule(10)
    y = np.zeros((1, 2, 2, 2))
    with pytest.raises(ValueError):
        reverse_step(y, 0, y, s)
    with pytest.raises(ValueError):
        reverse_step(y, 5, y, s, t_prev=5)
    with pytest.raises(ShapeError):
        reverse_step(y, 5, np.zeros((1, 3, 2, 2)), s)
    with pytest.raises(ValueError):
        reverse_step(y, 5, y, s, eta=1.0)


def test_stochastic_reverse_step_is_seeded(rng):
    s = make_schedule(10)
    y = rng.standard_normal((1, 2, 2, 2))
    a = reverse_step(y, 5, y, s, eta=1.0, rng=np.random.default_rng(3))
    b = reverse_step(y, 5, y, s, eta=1.0, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, reverse_step(y, 5, y, s))


def test_perfect_estimates_reconstruct_at_zero(rng):
    s = make_schedule(1000)
    y0 = rng.random((1, 3, 2, 2))
    y = rng.standard_normal(y0.shape)
    steps = sampling_timesteps(8, 1000)
    for i, t in enumerate(steps):
        y = reverse_step(y, t, y0, s, t_prev=steps[i + 1] if i + 1 < len(steps) else 0)
    np.testing.assert_allclose(y, y0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(1, 2000))
def test_sampling_timesteps_descend_over_full_range(n, T):
    if n > T:
        with pytest.raises(ValueError):
            sampling_timesteps(n, T)
        return
    ts = sampling_timesteps(n, T)
    assert len(ts) == n and ts[0] == T
    if n > 1:
        assert ts[-1] == 1 and all(a > b for a, b in zip(ts, ts[1:]))


def test_forward_statistics_small(rng):
    """Closed form and chained single steps agree in mean and variance."""
    s = make_schedule(100)
    y0 = rng.random((1, 2, 2, 2))
    n = 4000
    t = 60
    closed = forward_sample(np.broadcast_to(y0, (n,) + y0.shape), t, s, rng.standard_normal((n,) + y0.shape))
    chained = np.broadcast_to(y0, (n,) + y0.shape).copy()
    for k in range(1, t + 1):
        chained = forward_step(chained, k, s, rng.standard_normal(chained.shape))
    ab = s.alpha_bar(t)
    for draws in (closed, chained):
        bound = 3 * np.sqrt((1 - ab) / n)
        assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(ab) * y0) < bound)
        var_bound = 3 * (1 - ab) * np.sqrt(2 / (n - 1))
        assert np.all(np.abs(draws.var(axis=0, ddof=1) - (1 - ab)) < var_bound)


def oracle(y0):
    calls = []

    def model(y, prior, t, contexts):
        calls.append(t)
        return y0.copy()

    return model, calls


@pytest.mark.parametrize("steps", [1, 2, 4, 8])
def test_oracle_model_reconstructs_filtered_target(steps, rng):
    y0 = rng.dirichlet(np.ones(6), size=(3, 4)).transpose(2, 0, 1)[None]
    model, calls = oracle(y0)
    out = sample(np.full_like(y0, 1 / 6), [], model, make_schedule(1000), steps, 0, PLANES)
    np.testing.assert_array_equal(out, online_filter(y0, PLANES))
    assert len(calls) == steps


def test_single_iteration_equals_filtered_model_output(rng):
    prior = np.full((1, 6, 2, 3), 1 / 6)
    seen = {}

    def model(y, p, t, contexts):
        seen["y"] = y.copy()
        return np.abs(np.sin(y + p))

    out = sample(prior, [], model, make_schedule(50), 1, 11, PLANES)
    np.testing.assert_array_equal(seen["y"], np.random.default_rng(11).standard_normal(prior.shape))
    np.testing.assert_array_equal(out, online_filter(np.abs(np.sin(seen["y"] + prior)), PLANES))


def test_sample_is_deterministic_and_normalized(rng):
    prior = rng.dirichlet(np.ones(6), size=(2, 2)).transpose(2, 0, 1)[None]
    model = lambda y, p, t, c: np.tanh(y) * 0.1 + p
    for use_filter in (True, False):
        a = sample(prior, [], model, make_schedule(100), 4, 5, PLANES, use_filter)
        b = sample(prior, [], model, make_schedule(100), 4, 5, PLANES, use_filter)
        np.testing.assert_array_equal(a, b)
        check_probability_volume(a)


def test_sample_rejects_wrong_model_shape():
    prior = np.full((1, 6, 2, 2), 1 / 6)
    with pytest.raises(ShapeError):
        sample(prior, [], lambda y, p, t, c: y[:, :3], make_schedule(10), 2, 0, PLANES)
