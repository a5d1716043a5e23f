"""Image reconstruction quality metrics: PSNR, single-scale SSIM, diff stats.

Inputs are H x W x 3 float images; values are clamped to [0, 1] before any
metric is computed. PSNR of identical images is capped at 99 dB to keep
logs free of infinities.
"""

from __future__ import annotations

import numpy as np

__all__ = ["PSNR_CAP", "diff_report", "psnr", "ssim"]

PSNR_CAP = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _prep(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images (MAX = 1)."""
    a, b = _prep(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    """Separable 2-d Gaussian window, normalized to sum 1."""
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    g = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # valid-mode weighted local mean via sliding windows
    win = np.lib.stride_tricks.sliding_window_view(x, w.shape)
    return np.tensordot(win, w, axes=((2, 3), (0, 1)))


def ssim(a, b) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel over valid windows, then averaged; symmetric in
    its arguments. Requires images at least 11 pixels on each side.
    """
    a, b = _prep(a, b)
    h, w_ = a.shape[0], a.shape[1]
    if h < _SSIM_WINDOW or w_ < _SSIM_WINDOW:
        raise ValueError(f"image {h}x{w_} too small for an {_SSIM_WINDOW}-pixel window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    c1 = (_SSIM_K1 * 1.0) ** 2
    c2 = (_SSIM_K2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _windowed_mean(x, win)
        my = _windowed_mean(y, win)
        mxx = _windowed_mean(x * x, win)
        myy = _windowed_mean(y * y, win)
        mxy = _windowed_mean(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def diff_report(a, b) -> dict:
    """Elementwise difference statistics: max/mean absolute, per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = np.abs(a - b)
    per_channel = []
    if d.ndim == 3:
        for ch in range(d.shape[2]):
            per_channel.append({"max_abs": float(d[..., ch].max()),
                                "mean_abs": float(d[..., ch].mean())})
    return {"max_abs": float(d.max()),
            "mean_abs": float(d.mean()),
            "per_channel": per_channel}
