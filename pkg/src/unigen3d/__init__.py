"""Diffusion in a unified 3D token space, decoded by differentiable Gaussian splatting."""
__version__ = "0.1.0"
