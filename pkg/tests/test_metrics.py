import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectraldiff.metrics import PeakMode, SSIMMode, evaluate, mse, psnr, ssim

C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def naive_mse(a, b):
    total = 0.0
    h, w, c = a.shape
    for i in range(h):
        for j in range(w):
            for k in range(c):
                total += (a[i, j, k] - b[i, j, k]) ** 2
    return total / (h * w * c)


def naive_global_ssim(a, b):
    h, w, c = a.shape
    n = h * w
    scores = []
    for k in range(c):
        mx = sum(a[i, j, k] for i in range(h) for j in range(w)) / n
        my = sum(b[i, j, k] for i in range(h) for j in range(w)) / n
        vx = sum((a[i, j, k] - mx) ** 2 for i in range(h) for j in range(w)) / n
        vy = sum((b[i, j, k] - my) ** 2 for i in range(h) for j in range(w)) / n
        cov = sum((a[i, j, k] - mx) * (b[i, j, k] - my) for i in range(h) for j in range(w)) / n
        scores.append(((2 * mx * my + C1) * (2 * cov + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2)))
    return sum(scores) / c


def test_mse_constant_cases():
    a = np.full((4, 4, 3), 0.3)
    assert mse(a, a) == 0.0
    assert mse(a, a + 0.1) == pytest.approx(0.01, abs=1e-15)


def test_mse_matches_naive_loop(rng):
    a, b = rng.uniform(0, 1, (2, 9, 7, 3))
    assert abs(mse(a, b) - naive_mse(a, b)) < 1e-12


def test_psnr_worked_values():
    a = np.zeros((10, 10, 3))
    a[0, 0, 0] = 0.5  # max pixel of the reference is 0.5
    b = a + 0.1  # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, b, PeakMode.PAPER_LITERAL) == pytest.approx(10 * math.log10(0.25 / 0.01), abs=1e-9)
    assert psnr(a, b, "paper_literal") == pytest.approx(13.979400086720377, abs=1e-9)


def test_identical_images_give_sentinels(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == math.inf
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, a, SSIMMode.WINDOWED) == pytest.approx(1.0, abs=1e-9)


def test_ssim_of_two_constants():
    a = np.full((8, 8, 3), 0.25)
    b = np.full((8, 8, 3), 0.75)
    expected = (2 * 0.1875 + C1) / (0.625 + C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
    assert round(ssim(a, b), 4) == 0.6001


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))


def test_metrics_match_naive_oracles_on_many_pairs():
    rng = np.random.default_rng(99)
    for _ in range(100):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        m = naive_mse(a, b)
        assert abs(mse(a, b) - m) < 1e-12
        assert abs(psnr(a, b) - 10 * math.log10(1.0 / m)) < 1e-9
        assert abs(ssim(a, b) - naive_global_ssim(a, b)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), mode=st.sampled_from(list(SSIMMode)))
def test_ssim_is_symmetric(seed, mode):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (2, 12, 12, 3))
    assert abs(ssim(a, b, mode) - ssim(b, a, mode)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ssim_self_similarity(seed):
    a = np.random.default_rng(seed).uniform(0, 1, (10, 10, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_psnr_decreases_with_noise_amplitude(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    noise = rng.uniform(-1, 1, a.shape)
    values = [psnr(a, a + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.2, 0.4)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_windowed_mode_is_distinct_and_bounded(rng):
    a = rng.uniform(0, 1, (32, 32, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    g, w = ssim(a, b), ssim(a, b, SSIMMode.WINDOWED)
    assert g != w
    assert -1 <= w <= 1


def test_evaluate_bundles_all_metrics(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    b = np.clip(a + 0.05, 0, 1)
    r = evaluate(a, b)
    assert r.mse == mse(a, b) and r.psnr_db == psnr(a, b)
    assert r.ssim == ssim(a, b) and r.ssim_windowed == ssim(a, b, SSIMMode.WINDOWED)
