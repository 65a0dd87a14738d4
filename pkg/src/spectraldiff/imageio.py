"""8-bit RGB PNG input/output and paired-directory datasets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png"}


class PairingError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read an image as float64 (H, W, 3) in [0, 1]; 255 maps to exactly 1.0."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(field: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(field, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(field: np.ndarray, path) -> None:
    arr = to_uint8(field)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    # fixed encoder settings keep output byte-identical across runs
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def center_crop(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < height or w < width:
        raise ValueError(f"image {h}x{w} smaller than crop {height}x{width}")
    top, left = (h - height) // 2, (w - width) // 2
    return img[top : top + height, left : left + width]


def random_crop_pair(clean, rainy, height, width, rng):
    h, w = clean.shape[:2]
    top = int(rng.integers(0, h - height + 1))
    left = int(rng.integers(0, w - width + 1))
    window = (slice(top, top + height), slice(left, left + width))
    return clean[window], rainy[window]


@dataclass
class PairedDataset:
    """Ordered (clean, rainy) pairs decoded to float arrays in [0, 1]."""

    names: list[str]
    clean: list[np.ndarray]
    rainy: list[np.ndarray]

    def __len__(self):
        return len(self.names)

    def subset(self, indices) -> "PairedDataset":
        idx = list(indices)
        return PairedDataset([self.names[i] for i in idx], [self.clean[i] for i in idx], [self.rainy[i] for i in idx])

    def arrays(self):
        return np.stack(self.clean), np.stack(self.rainy)


def load_paired_dataset(directory, crop: tuple[int, int] | None = None) -> PairedDataset:
    """Load ``directory/clean`` and ``directory/rainy`` with matching filenames.

    ``crop`` center-crops every image to (H, W); images already at that size
    are left alone.
    """
    root = Path(directory)
    clean_dir, rainy_dir = root / "clean", root / "rainy"
    for sub in (clean_dir, rainy_dir):
        if not sub.is_dir():
            raise FileNotFoundError(f"missing directory: {sub}")
    clean_names = {p.name for p in list_images(clean_dir)}
    rainy_names = {p.name for p in list_images(rainy_dir)}
    orphans = sorted((clean_names ^ rainy_names))
    if orphans:
        where = ["rainy/" + n if n in rainy_names else "clean/" + n for n in orphans]
        raise PairingError(f"unpaired files: {', '.join(where)}")
    names = sorted(clean_names)
    if not names:
        raise PairingError(f"no image pairs found under {root}")
    clean, rainy = [], []
    for name in names:
        b, o = load_image(clean_dir / name), load_image(rainy_dir / name)
        if b.shape != o.shape:
            raise PairingError(f"{name}: clean {b.shape} and rainy {o.shape} differ in size")
        if crop is not None and b.shape[:2] != tuple(crop):
            b, o = center_crop(b, *crop), center_crop(o, *crop)
        clean.append(b)
        rainy.append(o)
    return PairedDataset(names, clean, rainy)
