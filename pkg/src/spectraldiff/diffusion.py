"""Noise schedule, spectral forward process and the induced spatial noise."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .fourier import fft2, ifft2, sample_complex_gaussian
from .masks import MaskBank

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class PerturbationMode(str, enum.Enum):
    SPATIAL_IID = "spatial_iid"
    SPECTRAL_UNMASKED = "spectral_unmasked"
    SPECTRAL_MASKED = "spectral_masked"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``betas[d]`` and ``alpha_bar[d]`` for d = 0..D; betas[0] is unused (0)."""

    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas) - 1

    def check_step(self, d: int) -> None:
        if not 1 <= d <= self.num_steps:
            raise ValueError(f"step {d} outside 1..{self.num_steps}")


def cosine_schedule(num_steps: int, s: float = COSINE_OFFSET, max_beta: float = MAX_BETA) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError(f"need at least one diffusion step, got {num_steps}")
    d = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((d / num_steps + s) / (1 + s)) * math.pi / 2) ** 2
    ratio = f[1:] / f[:-1]
    betas = np.clip(1.0 - ratio, 0.0, max_beta)
    betas = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def masked_noise(mask: np.ndarray, eps_f: np.ndarray) -> np.ndarray:
    """M_d * eps_f with the (H, W) mask broadcast over channels."""
    if eps_f.ndim == 3:
        mask = mask[:, :, None]
    return mask * eps_f


def forward_spectral(x_f0, d, eps_f, mask, schedule: NoiseSchedule):
    """Closed-form jump x_{f,0} -> x_{f,d} with masked complex noise."""
    schedule.check_step(d)
    if x_f0.shape != eps_f.shape:
        raise ValueError(f"shape mismatch: {x_f0.shape} vs {eps_f.shape}")
    ab = schedule.alpha_bar[d]
    return math.sqrt(ab) * x_f0 + math.sqrt(1.0 - ab) * masked_noise(mask, eps_f)


def forward_spectral_step(x_prev, beta, noise):
    """One step of the per-step recursion; ``noise`` is already masked."""
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def to_spatial_sample(x_fd):
    """Real part of the inverse transform, plus the discarded imaginary energy."""
    z = ifft2(x_fd)
    return z.real.copy(), float(np.sum(z.imag**2))


def induced_noise(x_sd, x_s0, alpha_bar_d: float):
    if alpha_bar_d >= 1.0:
        raise ValueError("alpha_bar_d must be < 1 to invert the forward process")
    return (x_sd - math.sqrt(alpha_bar_d) * x_s0) / math.sqrt(1.0 - alpha_bar_d)


def forward_spatial_step(x_prev, beta_d: float, eps_s):
    if np.shape(x_prev) != np.shape(eps_s):
        raise ValueError(f"shape mismatch: {np.shape(x_prev)} vs {np.shape(eps_s)}")
    return math.sqrt(1.0 - beta_d) * x_prev + math.sqrt(beta_d) * eps_s


def uniform_mask(height: int, width: int) -> np.ndarray:
    return np.full((height, width), 1.0 / math.sqrt(height * width))


def sample_perturbation(
    mode,
    d,
    bank: MaskBank | None,
    height,
    width,
    channels,
    rng: np.random.Generator,
    noise_scale: float = 1.0,
):
    """Draw one spatial perturbation eps_s for step d.

    SPECTRAL_* modes return Re(ifft2(M * eps_f)) with sum(M**2) == 1, so the
    expected total energy is ``noise_scale**2`` (not per pixel);
    ``noise_scale = sqrt(H * W)`` gives unit per-pixel variance.
    SPATIAL_IID is always standard normal and ignores ``noise_scale``.
    """
    mode = PerturbationMode(mode)
    if mode is PerturbationMode.SPATIAL_IID:
        return rng.standard_normal((height, width, channels))
    if mode is PerturbationMode.SPECTRAL_MASKED:
        if bank is None:
            raise ValueError("SPECTRAL_MASKED needs a mask bank")
        mask = bank[d]
        if mask.shape != (height, width):
            raise ValueError(f"bank resolution {mask.shape} does not match {(height, width)}")
    else:
        mask = uniform_mask(height, width)
    eps_f = sample_complex_gaussian(height, width, channels, rng=rng)
    return noise_scale * ifft2(masked_noise(mask, eps_f)).real


def corrupt(x_s0, d, eps_s, schedule: NoiseSchedule):
    """Spatial closed form sqrt(ab) x0 + sqrt(1 - ab) eps_s (batch-friendly)."""
    ab = schedule.alpha_bar[d]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x_s0) - np.ndim(ab)))
    return np.sqrt(ab) * x_s0 + np.sqrt(1.0 - ab) * eps_s


def forward_spatial_from_spectrum(x_s0, d, eps_f, mask, schedule: NoiseSchedule):
    """Training corruption path: spectral injection, then real inverse transform."""
    x_fd = forward_spectral(fft2(x_s0), d, eps_f, mask, schedule)
    x_sd, _ = to_spatial_sample(x_fd)
    return x_sd
