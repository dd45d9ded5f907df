"""Image quality metrics: PSNR (capped) and windowed SSIM."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; exact matches report the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ LUMA
    return img


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, out)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on luma; falls back to global statistics when the
    image is smaller than the window."""
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape != y.shape:
        raise ValueError("ssim inputs must share a shape")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    if min(x.shape) < SSIM_WINDOW:
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = ((x - mx) * (y - my)).mean()
        return float(((2 * mx * my + c1) * (2 * cxy + c2))
                     / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    k = _gauss_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mx = _filter_valid(x, k)
    my = _filter_valid(y, k)
    mxx = _filter_valid(x * x, k)
    myy = _filter_valid(y * y, k)
    mxy = _filter_valid(x * y, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())
