"""Toy paired data: procedural clean images plus masked-noise rain layers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fourier import ifft2, sample_complex_gaussian
from .imageio import save_image
from .masks import FrequencyGrid, MaskParams, make_mask


@dataclass(frozen=True)
class RainLayerSpec:
    mask_params: MaskParams
    gain: float

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError(f"gain must be nonnegative, got {self.gain}")

    def to_dict(self):
        return {**asdict(self.mask_params), "gain": self.gain}


def streak_field(mask: np.ndarray, rng) -> np.ndarray:
    """Zero-mean structured noise Re(ifft2(M * eps_f)), single channel."""
    h, w = mask.shape
    eps_f = sample_complex_gaussian(h, w, 1, rng=rng)[..., 0]
    return ifft2(mask * eps_f).real


def synth_rain_layer(spec: RainLayerSpec, height, width, rng, channels=3, mask=None) -> np.ndarray:
    """gain * max(0, streak field), broadcast to ``channels``."""
    if mask is None:
        mask = make_mask(FrequencyGrid.for_shape(height, width), spec.mask_params)
    layer = spec.gain * np.maximum(0.0, streak_field(mask, rng))
    return np.repeat(layer[:, :, None], channels, axis=2)


def compose_rainy(clean: np.ndarray, layers) -> np.ndarray:
    total = np.array(clean, dtype=np.float64, copy=True)
    for layer in layers:
        if np.shape(layer) != total.shape:
            raise ValueError(f"layer shape {np.shape(layer)} does not match image {total.shape}")
        total += layer
    return np.clip(total, 0.0, 1.0)


# -------------------------------------------------------- clean backgrounds


def _gradient(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = math.cos(angle) * xx + math.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    lo, hi = rng.uniform(0.05, 0.45, 3), rng.uniform(0.5, 0.9, 3)
    return lo + (hi - lo) * ramp[..., None]


def _checker(h, w, rng):
    period = int(rng.integers(4, max(5, min(h, w) // 2)))
    yy, xx = np.mgrid[0:h, 0:w]
    cells = ((yy // period + xx // period) % 2).astype(float)
    cells = gaussian_filter(cells, 0.7)
    a, b = rng.uniform(0.1, 0.5, 3), rng.uniform(0.4, 0.85, 3)
    return a + (b - a) * cells[..., None]


def _blobs(h, w, rng):
    noise = rng.standard_normal((h, w, 3))
    smooth = np.stack([gaussian_filter(noise[..., c], rng.uniform(2.0, 4.0), mode="wrap") for c in range(3)], axis=2)
    smooth = (smooth - smooth.mean()) / max(smooth.std(), 1e-9)
    return np.clip(0.45 + 0.15 * smooth, 0.0, 1.0)


_BACKGROUNDS = (_gradient, _checker, _blobs)


def procedural_image(height, width, rng) -> np.ndarray:
    kind = _BACKGROUNDS[int(rng.integers(len(_BACKGROUNDS)))]
    return np.clip(kind(height, width, rng), 0.0, 1.0)


# ------------------------------------------------------------------ dataset


@dataclass(frozen=True)
class RainSynthConfig:
    layer_count_range: tuple = (1, 3)
    gain_range: tuple = (3.0, 6.0)
    radii: tuple = (0.2, 0.3, 0.4)
    sigmas: tuple = (0.05, 0.1)
    kappas: tuple = (5.0, 10.0)


def random_layer_specs(rng, cfg: RainSynthConfig) -> list[RainLayerSpec]:
    lo, hi = cfg.layer_count_range
    n = int(rng.integers(lo, hi + 1))
    specs = []
    for _ in range(n):
        params = MaskParams(
            r=float(rng.choice(cfg.radii)),
            sigma=float(rng.choice(cfg.sigmas)),
            theta=float(rng.uniform(0.0, math.pi)),
            kappa=float(rng.choice(cfg.kappas)),
        )
        specs.append(RainLayerSpec(params, float(rng.uniform(*cfg.gain_range))))
    return specs


def synth_pair(height, width, rng, cfg: RainSynthConfig = RainSynthConfig()):
    """One (clean, rainy, layer specs) triple."""
    clean = procedural_image(height, width, rng)
    specs = random_layer_specs(rng, cfg)
    layers = [synth_rain_layer(s, height, width, rng) for s in specs]
    return clean, compose_rainy(clean, layers), specs


def synth_pairs(n_pairs, height, width, seed, cfg: RainSynthConfig = RainSynthConfig()):
    """In-memory pairs; pair i uses its own stream derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).spawn(n_pairs)
    out = [synth_pair(height, width, np.random.default_rng(s), cfg) for s in seeds]
    clean = np.stack([o[0] for o in out])
    rainy = np.stack([o[1] for o in out])
    return clean, rainy, [o[2] for o in out]


def make_toy_dataset(n_pairs, height, width, out_dir, seed=0, cfg: RainSynthConfig = RainSynthConfig()) -> dict:
    """Write clean/NNNN.png, rainy/NNNN.png and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "rainy").mkdir(parents=True, exist_ok=True)
    clean, rainy, specs = synth_pairs(n_pairs, height, width, seed, cfg)
    entries = []
    for i in range(n_pairs):
        name = f"{i:04d}.png"
        save_image(clean[i], out / "clean" / name)
        save_image(rainy[i], out / "rainy" / name)
        entries.append({
            "clean": f"clean/{name}",
            "rainy": f"rainy/{name}",
            "layers": [s.to_dict() for s in specs[i]],
        })
    manifest = {
        "n_pairs": n_pairs,
        "H": height,
        "W": width,
        "seed": seed,
        "layer_count_range": list(cfg.layer_count_range),
        "gain_range": list(cfg.gain_range),
        "pairs": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
