"""Pixel-space fidelity metrics for [-1, 1]-normalized data.

PSNR uses data range 2 (signals are normalized to [-1, 1]) and is capped
at 100 dB once the mean squared error drops below range^2 * 1e-10. SSIM
uses an 8x8 uniform sliding window with the standard stability constants
K1 = 0.01, K2 = 0.03; the window shrinks to fit inputs smaller than 8 in
either direction.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

__all__ = ["mse", "psnr", "ssim", "PSNR_CAP_DB"]

DATA_RANGE = 2.0
PSNR_CAP_DB = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, "metric operands")
    return a, b


def mse(a, b) -> float:
    """Mean squared error."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100."""
    err = mse(a, b)
    if err < data_range**2 * 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(data_range**2 / err)


def ssim(a, b, data_range: float = DATA_RANGE, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over uniform sliding windows.

    Inputs must be 2-D with matching shapes; local means, variances, and
    covariance use population (1/N) normalization within each window.
    """
    a, b = _pair(a, b)
    if a.ndim == 1:
        a = a[None, :]
        b = b[None, :]
    if a.ndim != 2:
        raise ShapeMismatchError("2-D", a.shape, "ssim operands")
    win = (min(window, a.shape[0]), min(window, a.shape[1]))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def moments(x):
        return sliding_window_view(x, win).mean(axis=(-2, -1))

    mu_a = moments(a)
    mu_b = moments(b)
    var_a = moments(a * a) - mu_a**2
    var_b = moments(b * b) - mu_b**2
    cov = moments(a * b) - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())
