"""PSNR and SSIM against normal-light references."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import to_srgb8

PSNR_CAP = 99.0
LUMA_601 = np.array([0.299, 0.587, 0.114])


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_view: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "per_view": self.per_view}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for peak 1.0; identical inputs give the 99 dB cap."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(-10.0 * np.log10(mse), PSNR_CAP))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    rows = sliding_window_view(img, len(g), axis=1) @ g
    return sliding_window_view(rows, len(g), axis=0) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, on luminance for RGB input."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a @ LUMA_601, b @ LUMA_601
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate(preds, gts, names=None, quantize: bool = True) -> MetricReport:
    """Per-view and mean metrics. With ``quantize`` the linear inputs are first encoded to 8-bit sRGB."""
    per_view = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        if quantize:
            p, g = to_srgb8(p) / 255.0, to_srgb8(g) / 255.0
        per_view.append({"view": names[i] if names else i, "psnr": psnr(p, g), "ssim": ssim(p, g)})
    if not per_view:
        raise ValueError("no views to evaluate")
    return MetricReport(float(np.mean([v["psnr"] for v in per_view])),
                        float(np.mean([v["ssim"] for v in per_view])), per_view)
