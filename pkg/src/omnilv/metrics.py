"""Full-reference fidelity metrics on RGB images in [0, 1]."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03


def resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Per-channel bicubic resize of a c×H×W float image."""
    if img.shape[1:] == (height, width):
        return img
    chans = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((width, height), Image.BICUBIC),
                        dtype=np.float64) for ch in img]
    return np.stack(chans)


def _match(output: np.ndarray, reference: np.ndarray) -> np.ndarray:
    output = np.asarray(output, dtype=np.float64)
    if output.shape[1:] != reference.shape[1:]:
        output = resize_bicubic(output, *reference.shape[1:])
    return output


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) over all channels; ``a`` is resized to ``b`` when shapes differ."""
    b = np.asarray(b, dtype=np.float64)
    a = _match(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: int):
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> np.ndarray:
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b, var_a, var_b, cov = _ssim_terms(a, b, window)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum * cs


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Uniform-window SSIM (dynamic range 1), mean over channels and all valid windows."""
    b = np.asarray(b, dtype=np.float64)
    a = _match(a, b)
    return float(ssim_map(a, b, window).mean())


def contrast_structure(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    c2 = SSIM_K2 ** 2
    _, _, var_a, var_b, cov = _ssim_terms(np.asarray(a, float), np.asarray(b, float), window)
    return float(((2 * cov + c2) / (var_a + var_b + c2)).mean())
