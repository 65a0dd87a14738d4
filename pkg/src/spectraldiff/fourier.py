"""Unitary 2-D DFT helpers.

Fields are real arrays shaped (H, W) or (H, W, C); spectra are complex arrays
of the same shape with DC at index (0, 0). The transform is taken over the two
leading axes only, so channels are independent.
"""

import numpy as np

_AXES = (0, 1)


def fft2(x: np.ndarray) -> np.ndarray:
    """Forward DFT with 1/sqrt(HW) scaling (norm preserving)."""
    return np.fft.fft2(np.asarray(x), axes=_AXES, norm="ortho")


def ifft2(s: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`. Always returns a complex array."""
    return np.fft.ifft2(np.asarray(s), axes=_AXES, norm="ortho")


def frequency_coords(height: int, width: int):
    """Normalized frequency coordinates (fy, fx), each in [-0.5, 0.5)."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    return np.broadcast_to(fy, (height, width)), np.broadcast_to(fx, (height, width))


def sample_complex_gaussian(height, width, channels=1, rng=None, seed=None):
    """Draw i.i.d. complex noise with standard normal real and imaginary parts.

    Either pass a ``numpy.random.Generator`` or an integer ``seed``. The
    result has shape (H, W, C) and E|eps|^2 = 2 per bin.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    shape = (height, width, channels)
    real = rng.standard_normal(shape)
    imag = rng.standard_normal(shape)
    return real + 1j * imag


def hermitian_error(s: np.ndarray) -> float:
    """Max relative deviation of ``s`` from S(-f) = conj(S(f))."""
    flipped = np.roll(np.flip(s, axis=_AXES), shift=1, axis=_AXES)
    scale = max(float(np.max(np.abs(s))), 1e-300)
    return float(np.max(np.abs(s - np.conj(flipped)))) / scale
