"""Image quality metrics over float images in [0, 1]."""

from __future__ import annotations

import numpy as np


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; identical images report 99.0."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return 99.0
    return float(-10.0 * np.log10(mse))


def _box_means(x: np.ndarray, win: int) -> np.ndarray:
    """Sliding win x win window means (valid mode) via an integral image."""
    ii = np.cumsum(np.cumsum(x, axis=0), axis=1)
    ii = np.pad(ii, ((1, 0), (1, 0)) + ((0, 0),) * (x.ndim - 2))
    s = (ii[win:, win:] - ii[:-win, win:] - ii[win:, :-win] + ii[:-win, :-win])
    return s / (win * win)


def ssim(image: np.ndarray, reference: np.ndarray, window: int = 8) -> float:
    """Structural similarity with uniform windows, averaged over windows
    and channels. C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError("image smaller than SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = _box_means(a, window)
    mu_b = _box_means(b, window)
    var_a = np.maximum(_box_means(a * a, window) - mu_a ** 2, 0.0)
    var_b = np.maximum(_box_means(b * b, window) - mu_b ** 2, 0.0)
    cov = _box_means(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
