"""Pixel-aligned 3D Gaussian prediction with multi-view diffusion denoising."""

__version__ = "0.1.0"
