"""Direction-weighted step selection and the deterministic deraining loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .fourier import fft2
from .masks import FrequencyGrid, MaskBank

N_DIRECTION_BINS = 60
BIN_WIDTH = math.pi / N_DIRECTION_BINS
MIN_RADIUS = 0.02
LUMA = np.array([0.299, 0.587, 0.114])


class TrajectoryError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class DirectionHistogram:
    """Spectral energy per 3-degree angular bin over [0, 180), summing to 1."""

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.shape != (N_DIRECTION_BINS,):
            raise ValueError(f"expected {N_DIRECTION_BINS} bins")

    def prob(self, theta) -> np.ndarray:
        return self.weights[angle_bin(theta)]


@dataclass(frozen=True)
class StepPlan:
    """Steps in traversal order d_S >= ... >= d_1 (first entry is always D)."""

    steps: tuple

    def __len__(self):
        return len(self.steps)


def angle_bin(theta) -> np.ndarray:
    folded = np.mod(theta, math.pi)
    return np.minimum((folded / BIN_WIDTH).astype(int), N_DIRECTION_BINS - 1)


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img @ LUMA


def estimate_direction_distribution(rainy, min_radius=MIN_RADIUS, temperature=1.0) -> DirectionHistogram:
    gray = to_gray(rainy)
    power = np.abs(fft2(gray)) ** 2
    grid = FrequencyGrid.for_shape(*gray.shape)
    keep = grid.radius >= min_radius
    hist = np.bincount(angle_bin(grid.angle[keep]), weights=power[keep], minlength=N_DIRECTION_BINS)
    total = hist.sum()
    # flat spectrum: nothing to prefer
    if not np.isfinite(total) or total <= 1e-12 * max(power.sum(), 1e-300) or total == 0:
        return DirectionHistogram(np.full(N_DIRECTION_BINS, 1.0 / N_DIRECTION_BINS))
    p = hist / total
    if temperature != 1.0:
        p = p ** (1.0 / temperature)
        p = p / p.sum()
    return DirectionHistogram(p)


def step_weights(hist: DirectionHistogram, bank: MaskBank, num_steps: int) -> np.ndarray:
    """w_d proportional to p(theta_d) for d = 1..D (index 0 is step 1)."""
    w = hist.prob(bank.thetas[:num_steps])
    if w.sum() <= 0:
        w = np.ones(num_steps)
    return w / w.sum()


def sample_steps(hist: DirectionHistogram, bank: MaskBank, num_steps: int, n_steps: int, rng) -> StepPlan:
    if n_steps < 1:
        raise ValueError("need at least one sampling step")
    if len(bank) < num_steps:
        raise ValueError(f"bank holds {len(bank)} masks, need {num_steps}")
    w = step_weights(hist, bank, num_steps)
    counts = rng.multinomial(n_steps - 1, w)
    drawn = np.repeat(np.arange(1, num_steps + 1), counts)
    steps = sorted([num_steps, *drawn.tolist()], reverse=True)
    return StepPlan(tuple(int(s) for s in steps))


def ddim_trajectory(rainy, model, plan: StepPlan, schedule: NoiseSchedule, cond=None):
    """Run the deterministic updates along ``plan``; yields (d, x_hat, x0_hat, eps_hat).

    ``model`` is any callable (x, d, c) -> eps_hat.
    """
    c = rainy if cond is None else cond
    x = np.asarray(rainy, dtype=np.float64)
    steps = plan.steps
    for i, d in enumerate(steps):
        ab = schedule.alpha_bar[d]
        eps = np.asarray(model(x, d, c), dtype=np.float64)
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if not np.all(np.isfinite(x0)):
            raise TrajectoryError(f"non-finite values at step d={d} (position {i})")
        yield d, x, x0, eps
        if i + 1 < len(steps):
            ab_next = schedule.alpha_bar[steps[i + 1]]
            x = math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps


def ddim_derain(rainy, model, bank: MaskBank, schedule: NoiseSchedule, n_steps=10, rng=None, plan=None, cond=None):
    """Derain one image (H, W, C). Returns (restored in [0, 1], plan used)."""
    if plan is None:
        rng = np.random.default_rng() if rng is None else rng
        hist = estimate_direction_distribution(rainy)
        plan = sample_steps(hist, bank, schedule.num_steps, n_steps, rng)
    x0 = None
    for _, _, x0, _ in ddim_trajectory(rainy, model, plan, schedule, cond):
        pass
    return np.clip(x0, 0.0, 1.0), plan
