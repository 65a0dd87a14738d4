import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from spectraldiff.diffusion import cosine_schedule
from spectraldiff.masks import GridSpec, build_bank
from spectraldiff.sampler import (
    N_DIRECTION_BINS,
    DirectionHistogram,
    StepPlan,
    TrajectoryError,
    angle_bin,
    ddim_derain,
    ddim_trajectory,
    estimate_direction_distribution,
    sample_steps,
)


@pytest.fixture(scope="module")
def full_grid_bank():
    """Full grid at a tiny resolution: only theta_d matters for step sampling."""
    return build_bank(4, 4, GridSpec.full())


def uniform_hist():
    return DirectionHistogram(np.full(N_DIRECTION_BINS, 1.0 / N_DIRECTION_BINS))


def oracle_model(x0, schedule):
    """Returns exactly the noise that maps x0 onto the current iterate."""

    def model(x, d, c):
        ab = schedule.alpha_bar[d]
        return (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)

    return model


def zero_model(x, d, c):
    return np.zeros_like(x)


def test_constant_image_gives_uniform_histogram():
    hist = estimate_direction_distribution(np.full((16, 16, 3), 0.4))
    assert np.allclose(hist.weights, 1.0 / N_DIRECTION_BINS)
    hist = estimate_direction_distribution(np.zeros((16, 16, 3)))
    assert np.allclose(hist.weights, 1.0 / N_DIRECTION_BINS)


def test_vertical_stripes_concentrate_on_horizontal_frequency_axis():
    xx = np.arange(32)[None, :] * np.ones((32, 1))
    stripes = 0.5 + 0.5 * np.cos(2 * np.pi * 4 * xx / 32)
    hist = estimate_direction_distribution(np.repeat(stripes[..., None], 3, axis=2))
    # variation along x puts all energy on the f_x axis, angle 0 (bin 0)
    assert int(np.argmax(hist.weights)) == 0
    assert hist.weights[0] > 0.99


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(4, 24), w=st.integers(4, 24))
def test_histogram_normalized(seed, h, w):
    img = np.random.default_rng(seed).uniform(0, 1, (h, w, 3))
    hist = estimate_direction_distribution(img)
    assert abs(hist.weights.sum() - 1.0) < 1e-9
    assert np.all(hist.weights >= 0)


def test_angle_bin_folds_by_half_turn():
    th = np.array([0.0, math.radians(2.9), math.radians(3.0), math.pi - 1e-9, math.pi, -math.radians(1.0)])
    assert angle_bin(th).tolist() == [0, 0, 1, 59, 0, 59]


def test_single_step_plan_is_terminal(full_grid_bank, rng):
    plan = sample_steps(uniform_hist(), full_grid_bank, 1080, 1, rng)
    assert plan.steps == (1080,)


def test_step_count_must_be_positive(full_grid_bank, rng):
    with pytest.raises(ValueError):
        sample_steps(uniform_hist(), full_grid_bank, 1080, 0, rng)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30))
def test_plans_sorted_and_terminate_at_d(seed, n, small_bank):
    rng = np.random.default_rng(seed)
    hist = estimate_direction_distribution(rng.uniform(0, 1, (8, 8, 3)))
    plan = sample_steps(hist, small_bank, 16, n, rng)
    assert len(plan) == n
    assert plan.steps[0] == 16
    assert list(plan.steps) == sorted(plan.steps, reverse=True)
    assert all(1 <= d <= 16 for d in plan.steps)


def test_uniform_histogram_gives_uniform_steps(full_grid_bank):
    rng = np.random.default_rng(2024)
    counts = np.zeros(1080)
    for _ in range(10_000):
        plan = sample_steps(uniform_hist(), full_grid_bank, 1080, 10, rng)
        # the forced terminal step is not a draw; drop one copy of D
        drawn = list(plan.steps[1:])
        np.add.at(counts, np.asarray(drawn) - 1, 1)
    assert counts.sum() == 90_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_concentrated_histogram_selects_only_matching_orientations(full_grid_bank, rng):
    weights = np.zeros(N_DIRECTION_BINS)
    weights[17] = 1.0
    plan = sample_steps(DirectionHistogram(weights), full_grid_bank, 1080, 50, rng)
    drawn = np.asarray(plan.steps[1:])
    assert np.all(angle_bin(full_grid_bank.thetas[drawn - 1]) == 17)


def _corrupted(x0, d, schedule, rng):
    ab = schedule.alpha_bar[d]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


@pytest.mark.parametrize("n_steps", [10, 64])
def test_oracle_denoiser_recovers_clean_image(n_steps, rng):
    d_max = 64
    schedule = cosine_schedule(d_max)
    bank = build_bank(8, 8, GridSpec.reduced(n_theta=16, radii=(0.2, 0.3), sigmas=(0.1,), kappas=(2.0, 5.0)))
    x0 = rng.uniform(0, 1, (8, 8, 3))
    rainy = _corrupted(x0, d_max, schedule, rng)
    hist = estimate_direction_distribution(rainy)
    plan = sample_steps(hist, bank, d_max, n_steps, rng)
    visited = 0
    for d, x, x0_hat, _ in ddim_trajectory(rainy, oracle_model(x0, schedule), plan, schedule):
        assert np.max(np.abs(x0_hat - x0)) < 1e-5, d
        visited += 1
    assert visited == n_steps
    restored, _ = ddim_derain(rainy, oracle_model(x0, schedule), bank, schedule, plan=plan)
    assert np.max(np.abs(restored - x0)) < 1e-5


def test_zero_model_trace_is_a_pure_rescaling(schedule16, rng):
    rainy = rng.uniform(0, 1, (8, 8, 3))
    plan = StepPlan((16, 12, 12, 7, 3, 1))
    expected = rainy / math.sqrt(schedule16.alpha_bar[16])
    trace = list(ddim_trajectory(rainy, zero_model, plan, schedule16))
    for (d, x, x0_hat, _), d_plan in zip(trace, plan.steps):
        assert d == d_plan
        np.testing.assert_allclose(x0_hat, expected, rtol=1e-12)
        np.testing.assert_allclose(x, math.sqrt(schedule16.alpha_bar[d]) * expected, rtol=1e-12)


def test_output_clamped_only_at_the_end(schedule16, rng, small_bank):
    rainy = rng.uniform(0.2, 1, (8, 8, 3))
    plan = StepPlan((16, 8, 2))
    trace = list(ddim_trajectory(rainy, zero_model, plan, schedule16))
    assert trace[-1][2].max() > 1.0  # iterates are unclamped
    restored, _ = ddim_derain(rainy, zero_model, small_bank, schedule16, plan=plan)
    assert restored.max() == 1.0 and restored.min() >= 0.0


def test_duplicate_step_is_a_no_op(rng):
    schedule = cosine_schedule(32)
    w = rng.standard_normal((3, 8, 8, 3))

    def model(x, d, c):
        # a fixed nonlinear function of (x, d, c)
        return np.tanh(np.einsum("hwc,khwc->hwc", x, w) + 0.1 * d) + 0.3 * c

    rainy = rng.uniform(0, 1, (8, 8, 3))
    base = StepPlan((32, 20, 9, 4))
    dup = StepPlan((32, 20, 20, 9, 4))
    a = list(ddim_trajectory(rainy, model, base, schedule))
    b = list(ddim_trajectory(rainy, model, dup, schedule))
    # the second visit of d=20 starts from the same iterate
    assert np.max(np.abs(b[2][1] - b[1][1])) < 1e-9
    assert np.max(np.abs(a[-1][2] - b[-1][2])) < 1e-9


def test_trajectory_is_deterministic(schedule16, rng):
    rainy = rng.uniform(0, 1, (8, 8, 3))
    plan = StepPlan((16, 9, 3))

    def model(x, d, c):
        return np.sin(x * d) * 0.1

    out1 = [t[2] for t in ddim_trajectory(rainy, model, plan, schedule16)]
    out2 = [t[2] for t in ddim_trajectory(rainy, model, plan, schedule16)]
    for a, b in zip(out1, out2):
        assert np.array_equal(a, b)


def test_nan_aborts_with_step(schedule16, rng):
    def bad(x, d, c):
        return np.full_like(x, np.nan) if d == 9 else np.zeros_like(x)

    with pytest.raises(TrajectoryError, match="d=9"):
        list(ddim_trajectory(rng.uniform(0, 1, (4, 4, 3)), bad, StepPlan((16, 9, 3)), schedule16))
