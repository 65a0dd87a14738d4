"""Spectral-structured diffusion for single-image rain removal.

Masked complex Gaussian noise in the Fourier domain drives a DDIM-style
restoration trajectory; the denoiser is a U-Net built from element-wise
product layers (or 3x3 convolutions, for comparison).
"""

__version__ = "0.1.0"
