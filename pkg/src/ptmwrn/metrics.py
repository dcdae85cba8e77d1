"""PSNR and SSIM on [0, 1]-normalized images."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor
from .imageio import ImageFile

WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_nchw(img) -> np.ndarray:
    if isinstance(img, ImageFile):
        img = img.pixels
    if isinstance(img, Tensor):
        img = img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None, None]
    if arr.ndim == 3:
        return arr[None]
    if arr.ndim != 4:
        raise ValueError(f"cannot interpret array of shape {arr.shape} as an image")
    return arr


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); ``math.inf`` for identical inputs."""
    x, y = _as_nchw(a), _as_nchw(b)
    if x.shape != y.shape:
        raise ValueError(f"image dims differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully contained window of a single-channel pair."""
    g = gaussian_window()
    if a.shape[0] < g.size or a.shape[1] < g.size:
        raise ValueError(f"image {a.shape} is smaller than the {g.size}x{g.size} window")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM; color inputs are scored per channel and averaged."""
    x, y = _as_nchw(a), _as_nchw(b)
    if x.shape != y.shape:
        raise ValueError(f"image dims differ: {x.shape} vs {y.shape}")
    scores = [
        ssim_map(x[n, c], y[n, c], data_range).mean() for n in range(x.shape[0]) for c in range(x.shape[1])
    ]
    return float(np.mean(scores))
