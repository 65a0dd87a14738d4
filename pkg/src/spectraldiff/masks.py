"""Directional band-pass frequency masks and the per-step mask bank.

Each mask combines a radial Gaussian band around ``r`` with a von Mises
angular profile around ``theta``; the square root of the product is scaled to
unit L2 norm so that sum(M**2) == 1.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fourier import frequency_coords

MAX_RADIUS = 0.5 * math.sqrt(2.0)

_MAGIC = b"SDMB"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_PARAMS = struct.Struct("<4d")


class MaskParameterError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class BankFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MaskParams:
    r: float
    sigma: float
    theta: float  # radians in [0, pi)
    kappa: float

    def __post_init__(self):
        if not 0.0 < self.r <= MAX_RADIUS + 1e-12:
            raise MaskParameterError(f"r must lie in (0, {MAX_RADIUS:.4f}], got {self.r}")
        if self.sigma <= 0:
            raise MaskParameterError(f"sigma must be positive, got {self.sigma}")
        if self.kappa <= 0:
            raise MaskParameterError(f"kappa must be positive, got {self.kappa}")


@dataclass(frozen=True)
class FrequencyGrid:
    """Polar coordinates of every DFT bin. theta(0, 0) is defined as 0."""

    radius: np.ndarray
    angle: np.ndarray

    @classmethod
    def for_shape(cls, height: int, width: int) -> "FrequencyGrid":
        fy, fx = frequency_coords(height, width)
        radius = np.hypot(fx, fy)
        angle = np.arctan2(fy, fx)
        angle = np.where(radius == 0, 0.0, angle)
        return cls(radius=radius, angle=angle)

    @property
    def shape(self):
        return self.radius.shape


def radial_mask(grid: FrequencyGrid, r: float, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise MaskParameterError(f"sigma must be positive, got {sigma}")
    return np.exp(-((grid.radius - r) ** 2) / (2.0 * sigma**2))


def angular_mask(grid: FrequencyGrid, theta: float, kappa: float) -> np.ndarray:
    # applied over the full (-pi, pi] circle, no symmetrization
    if kappa <= 0:
        raise MaskParameterError(f"kappa must be positive, got {kappa}")
    return np.exp(kappa * np.cos(grid.angle - theta))


def compose_and_normalize(m_radial: np.ndarray, m_angular: np.ndarray) -> np.ndarray:
    if m_radial.shape != m_angular.shape:
        raise ValueError(f"shape mismatch: {m_radial.shape} vs {m_angular.shape}")
    root = np.sqrt(m_radial * m_angular)
    norm = np.sqrt(np.sum(root**2))
    if not np.isfinite(norm) or norm == 0:
        raise DegenerateMaskError("mask product is identically zero; cannot normalize")
    return root / norm


def make_mask(grid: FrequencyGrid, params: MaskParams) -> np.ndarray:
    return compose_and_normalize(
        radial_mask(grid, params.r, params.sigma),
        angular_mask(grid, params.theta, params.kappa),
    )


@dataclass(frozen=True)
class GridSpec:
    """Enumeration of mask parameters. Angles are given in degrees."""

    radii: Sequence[float]
    sigmas: Sequence[float]
    thetas_deg: Sequence[float]
    kappas: Sequence[float]

    @classmethod
    def full(cls) -> "GridSpec":
        return cls(
            radii=(0.1, 0.3, 0.5),
            sigmas=(0.05, 0.2),
            thetas_deg=tuple(float(3 * i) for i in range(60)),
            kappas=(2.0, 5.0, 10.0),
        )

    @classmethod
    def reduced(cls, n_theta: int = 12, radii=(0.3,), sigmas=(0.1,), kappas=(5.0,)) -> "GridSpec":
        """Coarser angular sampling for desk-scale runs (D = product of sizes)."""
        step = 180.0 / n_theta
        return cls(
            radii=tuple(radii),
            sigmas=tuple(sigmas),
            thetas_deg=tuple(step * i for i in range(n_theta)),
            kappas=tuple(kappas),
        )

    def __len__(self):
        return len(self.radii) * len(self.sigmas) * len(self.thetas_deg) * len(self.kappas)

    def params(self) -> list[MaskParams]:
        """Lexicographic over (r, sigma, kappa, theta) with theta innermost."""
        for name in ("radii", "sigmas", "thetas_deg", "kappas"):
            if len(getattr(self, name)) == 0:
                raise MaskParameterError(f"grid dimension {name!r} is empty")
        return [
            MaskParams(r=float(r), sigma=float(s), theta=math.radians(t), kappa=float(k))
            for r, s, k, t in itertools.product(self.radii, self.sigmas, self.kappas, self.thetas_deg)
        ]

    def to_dict(self):
        return {
            "radii": list(self.radii),
            "sigmas": list(self.sigmas),
            "thetas_deg": list(self.thetas_deg),
            "kappas": list(self.kappas),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(d[k]) for k in ("radii", "sigmas", "thetas_deg", "kappas")})


@dataclass(frozen=True, eq=False)
class MaskBank:
    """Ordered masks M_1..M_D (float32, shape (D, H, W)) with their parameters.

    Steps are 1-based: ``bank[d]`` is the mask of diffusion step d.
    """

    masks: np.ndarray
    params: tuple[MaskParams, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.masks.ndim != 3:
            raise ValueError("masks must be shaped (D, H, W)")
        if len(self.params) != self.masks.shape[0]:
            raise ValueError("params and masks disagree on D")
        self.masks.setflags(write=False)

    def __len__(self):
        return self.masks.shape[0]

    def __getitem__(self, d: int) -> np.ndarray:
        if not 1 <= d <= len(self):
            raise IndexError(f"step {d} outside 1..{len(self)}")
        return self.masks[d - 1]

    @property
    def height(self):
        return self.masks.shape[1]

    @property
    def width(self):
        return self.masks.shape[2]

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.params])


def build_bank(height: int, width: int, grid_spec: GridSpec | None = None, order="lexicographic", seed=0) -> MaskBank:
    """Masks for every grid point, assigned to steps 1..D.

    ``order="shuffled"`` permutes the step assignment with ``seed``.
    """
    grid_spec = GridSpec.full() if grid_spec is None else grid_spec
    params = grid_spec.params()
    if order == "shuffled":
        perm = np.random.default_rng(seed).permutation(len(params))
        params = [params[i] for i in perm]
    elif order != "lexicographic":
        raise ValueError(f"unknown mask order {order!r}")
    grid = FrequencyGrid.for_shape(height, width)

    # radial and angular factors are reused across the grid
    radial = {(p.r, p.sigma): None for p in params}
    for key in radial:
        radial[key] = radial_mask(grid, *key)
    angular = {(p.theta, p.kappa): None for p in params}
    for key in angular:
        angular[key] = angular_mask(grid, *key)

    masks = np.empty((len(params), height, width), dtype=np.float32)
    for i, p in enumerate(params):
        masks[i] = compose_and_normalize(radial[p.r, p.sigma], angular[p.theta, p.kappa])
    return MaskBank(masks=masks, params=tuple(params))


def save_bank(bank: MaskBank, path) -> None:
    d, h, w = bank.masks.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, d, h, w))
        for p, m in zip(bank.params, bank.masks):
            fh.write(_PARAMS.pack(p.r, p.sigma, p.theta, p.kappa))
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_bank(path) -> MaskBank:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise BankFormatError(f"{path}: file too short for header")
    magic, version, d, h, w = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise BankFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise BankFormatError(f"{path}: unsupported version {version}")
    if d == 0 or h == 0 or w == 0:
        raise BankFormatError(f"{path}: empty dimensions D={d} H={h} W={w}")
    record = _PARAMS.size + 4 * h * w
    if len(raw) != _HEADER.size + d * record:
        raise BankFormatError(
            f"{path}: payload holds {len(raw) - _HEADER.size} bytes, header declares {d * record}"
        )
    masks = np.empty((d, h, w), dtype=np.float32)
    params = []
    offset = _HEADER.size
    for i in range(d):
        r, s, t, k = _PARAMS.unpack_from(raw, offset)
        try:
            params.append(MaskParams(r=r, sigma=s, theta=t, kappa=k))
        except MaskParameterError as exc:
            raise BankFormatError(f"{path}: record {i}: {exc}") from exc
        offset += _PARAMS.size
        masks[i] = np.frombuffer(raw, dtype="<f4", count=h * w, offset=offset).reshape(h, w)
        offset += 4 * h * w
    return MaskBank(masks=masks, params=tuple(params))
