"""MSE, PSNR and SSIM on images normalized to [0, 1].

SSIM defaults to global statistics per channel (one mean/variance/covariance
over the whole image), averaged over channels. A windowed variant with the
usual 11x11 Gaussian window is available for comparison.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

K1 = 0.01
K2 = 0.03
DYNAMIC_RANGE = 1.0


class PeakMode(str, enum.Enum):
    RANGE = "range"
    PAPER_LITERAL = "paper_literal"


class SSIMMode(str, enum.Enum):
    GLOBAL = "global"
    WINDOWED = "windowed"


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    ssim_windowed: float | None = None


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _channels(a):
    return a[..., None] if a.ndim == 2 else a


def mse(clean, restored) -> float:
    a, b = _check(clean, restored)
    return float(np.mean((b - a) ** 2))


def psnr(clean, restored, peak_mode=PeakMode.RANGE) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images match."""
    a, b = _check(clean, restored)
    err = float(np.mean((b - a) ** 2))
    if err == 0:
        return math.inf
    peak = 1.0 if PeakMode(peak_mode) is PeakMode.RANGE else float(a.max())
    return 10.0 * math.log10(peak**2 / err)


def _ssim_from_stats(mu_a, mu_b, var_a, var_b, cov):
    c1 = (K1 * DYNAMIC_RANGE) ** 2
    c2 = (K2 * DYNAMIC_RANGE) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(clean, restored, mode=SSIMMode.GLOBAL) -> float:
    a, b = _check(clean, restored)
    a, b = _channels(a), _channels(b)
    mode = SSIMMode(mode)
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        if mode is SSIMMode.GLOBAL:
            mx, my = x.mean(), y.mean()
            scores.append(
                _ssim_from_stats(mx, my, ((x - mx) ** 2).mean(), ((y - my) ** 2).mean(), ((x - mx) * (y - my)).mean())
            )
        else:
            scores.append(_windowed_ssim(x, y))
    return float(np.mean(scores))


def _windowed_ssim(x, y, sigma=1.5, size=11):
    truncate = (size // 2) / sigma

    def blur(z):
        return gaussian_filter(z, sigma, truncate=truncate, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx**2
    vy = blur(y * y) - my**2
    cov = blur(x * y) - mx * my
    return float(np.mean(_ssim_from_stats(mx, my, vx, vy, cov)))


def evaluate(clean, restored, peak_mode=PeakMode.RANGE) -> MetricReport:
    return MetricReport(
        mse=mse(clean, restored),
        psnr_db=psnr(clean, restored, peak_mode),
        ssim=ssim(clean, restored, SSIMMode.GLOBAL),
        ssim_windowed=ssim(clean, restored, SSIMMode.WINDOWED),
    )
