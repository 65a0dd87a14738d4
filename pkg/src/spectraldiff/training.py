"""Noise-prediction training with structured spectral corruption."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .denoiser import DenoiserModel, build_graph, save_checkpoint
from .diffusion import NoiseSchedule, PerturbationMode, corrupt, masked_noise, uniform_mask
from .fourier import fft2, ifft2, sample_complex_gaussian
from .imageio import random_crop_pair
from .masks import MaskBank

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 4
    lr: float = 2e-4
    min_lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    eval_every: int = 25
    mode: PerturbationMode = PerturbationMode.SPECTRAL_MASKED
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.mode = PerturbationMode(self.mode)
        self.betas = tuple(self.betas)
        if not 0 < self.lr < 1:
            raise ValueError(f"learning rate must lie in (0, 1), got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    checkpoint: str | None = None
    wall_clock: float = 0.0

    def smoothed(self, window=50) -> np.ndarray:
        x = np.asarray(self.losses)
        window = max(1, min(window, len(x)))
        return np.convolve(x, np.ones(window) / window, mode="valid")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "loss", "lr"])
            for i, (loss, lr) in enumerate(zip(self.losses, self.lrs), start=1):
                writer.writerow([i, repr(float(loss)), repr(float(lr))])


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict, lr, betas=(0.9, 0.999), weight_decay=1e-4, eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p
            p -= (self.lr * update).astype(p.dtype)


class ReduceOnPlateau:
    """Multiply the lr by ``factor`` after ``patience`` evaluations without improvement."""

    def __init__(self, optimizer: AdamW, factor=0.5, patience=10, min_lr=1e-6, threshold=1e-4):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_evals = 0

    def step(self, metric: float) -> None:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad_evals = 0
            return
        self.bad_evals += 1
        if self.bad_evals > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad_evals = 0

    @property
    def at_floor(self) -> bool:
        return self.optimizer.lr <= self.min_lr


def corrupt_batch(clean, steps, schedule: NoiseSchedule, bank: MaskBank | None, rng, mode, noise_scale=1.0):
    """Corrupt a batch (N, H, W, C) of clean images.

    Returns (x_sd, eps_s). Spectral modes inject masked complex noise into
    fft2(x0), take the real inverse transform as x_sd and recover eps_s by
    inverting the closed form.
    """
    mode = PerturbationMode(mode)
    n, h, w, c = clean.shape
    ab = schedule.alpha_bar[np.asarray(steps)]
    if mode is PerturbationMode.SPATIAL_IID:
        # already unit variance per pixel; noise_scale only lifts the spectral modes
        eps_s = rng.standard_normal(clean.shape)
        return corrupt(clean, steps, eps_s, schedule), eps_s

    x_sd = np.empty_like(clean, dtype=np.float64)
    for i, d in enumerate(steps):
        mask = bank[d] if mode is PerturbationMode.SPECTRAL_MASKED else uniform_mask(h, w)
        eps_f = sample_complex_gaussian(h, w, c, rng=rng)
        x_fd = math.sqrt(ab[i]) * fft2(clean[i]) + math.sqrt(1.0 - ab[i]) * noise_scale * masked_noise(mask, eps_f)
        x_sd[i] = ifft2(x_fd).real
    shape = (n, 1, 1, 1)
    eps_s = (x_sd - np.sqrt(ab).reshape(shape) * clean) / np.sqrt(1.0 - ab).reshape(shape)
    return x_sd, eps_s


def loss_and_grads(model: DenoiserModel, x_sd, steps, cond, eps_s):
    """Mean over the batch of ||eps_s - eps_hat||^2 and its parameter gradients."""
    out, leaves = build_graph(model, x_sd, steps, cond)
    target = np.ascontiguousarray(np.asarray(eps_s).transpose(0, 3, 1, 2), dtype=out.data.dtype)
    loss = ag.mse_sum(out, target)
    loss.backward()
    return float(loss.data), {k: t.grad for k, t in leaves.items()}


def train_step(clean, rainy, model: DenoiserModel, opt: AdamW, schedule, bank, rng, mode=PerturbationMode.SPECTRAL_MASKED, noise_scale=1.0):
    """One optimizer step on a batch of (clean, rainy) pairs; returns the loss."""
    clean = np.asarray(clean, dtype=np.float64)
    rainy = np.asarray(rainy, dtype=np.float64)
    num_steps = schedule.num_steps
    if bank is not None and len(bank) < num_steps:
        raise ValueError(f"bank has {len(bank)} masks but the schedule has {num_steps} steps")
    steps = rng.integers(1, num_steps + 1, size=clean.shape[0])
    x_sd, eps_s = corrupt_batch(clean, steps, schedule, bank, rng, mode, noise_scale)
    loss, grads = loss_and_grads(model, x_sd, steps, rainy, eps_s)
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss became {loss} (steps {steps.tolist()})")
    opt.step(model.params, grads)
    return loss


def _draw_batch(clean, rainy, batch_size, height, width, rng):
    idx = rng.integers(0, len(clean), size=batch_size)
    bs, os_ = [], []
    for i in idx:
        b, o = clean[i], rainy[i]
        if b.shape[:2] != (height, width):
            b, o = random_crop_pair(b, o, height, width, rng)
        bs.append(b)
        os_.append(o)
    return np.stack(bs), np.stack(os_)


def train_loop(clean, rainy, model: DenoiserModel, schedule: NoiseSchedule, bank: MaskBank | None, cfg: TrainConfig,
               checkpoint_path=None, loss_csv=None, progress=None) -> TrainReport:
    """Train ``model`` in place on aligned lists/arrays of clean and rainy images."""
    if len(clean) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.weight_decay, cfg.eps)
    plateau = ReduceOnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    if bank is not None:
        height, width = bank.height, bank.width
    else:
        height, width = np.shape(clean[0])[:2]
    report = TrainReport()
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        b, o = _draw_batch(clean, rainy, cfg.batch_size, height, width, rng)
        loss = train_step(b, o, model, opt, schedule, bank, rng, cfg.mode, cfg.noise_scale)
        report.losses.append(loss)
        report.lrs.append(opt.lr)
        if it % cfg.eval_every == 0:
            plateau.step(float(np.mean(report.losses[-cfg.eval_every :])))
            if progress is not None:
                progress(it, report)
            if plateau.at_floor and plateau.bad_evals >= plateau.patience:
                log.info("converged at iteration %d (plateau at minimum lr)", it)
                break
    report.wall_clock = time.perf_counter() - start
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    if loss_csv is not None:
        report.write_csv(loss_csv)
    return report


def finite_difference_check(params: dict, loss_fn, grads: dict, n_params=200, h=1e-5, seed=0, floor=1e-6):
    """Largest relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn()`` re-evaluates the loss from the current contents of
    ``params``, which are perturbed in place and restored. Relative error is
    |a - n| / max(|a|, |n|, floor) over a random subset of scalar entries.
    """
    index = [(name, i) for name, p in params.items() for i in range(p.size)]
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(index), size=min(n_params, len(index)), replace=False)
    worst = 0.0
    for k in chosen:
        name, i = index[k]
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[name].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst


def near_target_sample(model: DenoiserModel, rng, batch=2, height=8, width=8, residual=0.01):
    """A (x_sd, steps, cond, eps_s) sample whose target sits close to the prediction.

    Keeping the loss small keeps round-off in the central differences
    (about eps * loss / h) well below the gradients being checked.
    """
    model64 = model.astype(np.float64)
    c = model.config.image_channels
    x = rng.standard_normal((batch, height, width, c))
    cond = rng.uniform(0.0, 1.0, (batch, height, width, c))
    steps = rng.integers(1, model.config.num_steps + 1, size=batch)
    out, _ = build_graph(model64, x, steps, cond)
    eps = out.data.transpose(0, 2, 3, 1) + residual * rng.standard_normal(x.shape)
    return x, steps, cond, eps


def gradient_check(model: DenoiserModel, sample, n_params=200, h=1e-5, seed=0, floor=1e-6):
    """Backprop versus central differences on a float64 copy of ``model``.

    ``sample`` is (x_sd, steps, cond, eps_s) with batch-first arrays.
    """
    model = model.astype(np.float64)
    x_sd, steps, cond, eps_s = sample
    _, grads = loss_and_grads(model, x_sd, steps, cond, eps_s)
    target = np.asarray(eps_s).transpose(0, 3, 1, 2)

    def loss_at():
        out, _ = build_graph(model, x_sd, steps, cond)
        return float(np.sum((out.data - target) ** 2) / out.shape[0])

    return finite_difference_check(model.params, loss_at, grads, n_params, h, seed, floor)
