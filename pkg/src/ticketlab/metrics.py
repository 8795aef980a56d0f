"""MSE, PSNR and SSIM for channels-last images.

SSIM uses the usual 11x11 Gaussian window (sigma 1.5) with ``K1=0.01``,
``K2=0.03``, valid-mode filtering, evaluated per channel and averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_INF = math.inf


@dataclass(frozen=True)
class MetricConfig:
    max_value: float = 1.0
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.max_value <= 0:
            raise ValueError("max_value must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window size must be odd")

    @property
    def c1(self) -> float:
        return (self.k1 * self.max_value) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.max_value) ** 2


DEFAULT = MetricConfig()


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, cfg: MetricConfig = DEFAULT) -> float:
    """``10 log10(MAX^2 / MSE)`` in dB; ``inf`` when the images are identical."""
    err = mse(x, y)
    if err == 0:
        return PSNR_INF
    return 10.0 * math.log10(cfg.max_value ** 2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1-D normalized Gaussian taps."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation over the two leading axes
    k = g.size
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i: h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j: w - k + 1 + j] for j in range(k))


def ssim_map(x, y, cfg: MetricConfig = DEFAULT) -> np.ndarray:
    """Per-location, per-channel SSIM, shape ``[H-win+1, W-win+1, C]``."""
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[0], x.shape[1]) < cfg.window:
        raise ValueError(
            f"image {x.shape[0]}x{x.shape[1]} is smaller than the {cfg.window}x{cfg.window} SSIM window")
    g = gaussian_window(cfg.window, cfg.sigma)
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x ** 2
    syy = _filter_valid(y * y, g) - mu_y ** 2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))


def ssim(x, y, cfg: MetricConfig = DEFAULT) -> float:
    return float(np.mean(ssim_map(x, y, cfg)))
