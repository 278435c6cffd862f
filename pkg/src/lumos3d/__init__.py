"""Differentiable 3D Gaussian core for low-light multi-view scene restoration."""

from .core import CameraView, GaussianPrimitive, GaussianScene
from .renderer import BACKEND, RenderOptions, render, render_backward

__version__ = "0.1.0"

__all__ = ["CameraView", "GaussianPrimitive", "GaussianScene", "RenderOptions", "render",
           "render_backward", "BACKEND", "__version__"]
