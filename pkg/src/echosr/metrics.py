"""Evaluation metrics: PSNR and SSIM on the luma channel.

All metrics run in float64 on plain arrays; they are measurement tools, not
part of the differentiable graph.  Inputs are unit-range RGB images shaped
(3, h, w) or batches (n, 3, h, w).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

# ITU-R BT.601 studio-swing luma coefficients for unit-range inputs
_Y_COEF = np.array([65.481, 128.553, 24.966])
_Y_OFFSET = 16.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(img) -> np.ndarray:
    if isinstance(img, Tensor):
        img = img.data
    arr = np.asarray(img, dtype=np.float64)
    return arr


def rgb_to_y(img) -> np.ndarray:
    """BT.601 studio-swing luma of a unit-range RGB image.

    Accepts (3, h, w) or (n, 3, h, w); returns the same layout with the
    channel axis dropped.  Black maps to 16/255, white to 235/255.
    """
    arr = _as_array(img)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return (_Y_OFFSET + np.einsum("chw,c->hw", arr, _Y_COEF)) / 255.0
    if arr.ndim == 4 and arr.shape[1] == 3:
        return (_Y_OFFSET + np.einsum("nchw,c->nhw", arr, _Y_COEF)) / 255.0
    raise ShapeError(f"rgb_to_y expects a 3-channel image, got shape {arr.shape}")


def _y_pair(sr, gt, crop_border: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(sr), _as_array(gt)
    if a.shape != b.shape:
        raise ShapeError(f"metric shape mismatch: {a.shape} vs {b.shape}")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if ya.ndim == 3:  # batch: metrics below average over images via flattening
        ya = ya.reshape(-1, *ya.shape[-2:])
        yb = yb.reshape(-1, *yb.shape[-2:])
    else:
        ya, yb = ya[None], yb[None]
    if crop_border:
        ya = ya[:, crop_border:-crop_border, crop_border:-crop_border]
        yb = yb[:, crop_border:-crop_border, crop_border:-crop_border]
    if ya.shape[-1] < 1 or ya.shape[-2] < 1:
        raise ShapeError("crop_border leaves an empty image")
    return ya, yb


def psnr_y(sr, gt, crop_border: int = 0) -> float:
    """Peak signal-to-noise ratio in dB on cropped luma planes.

    Identical inputs give +inf (never a capped number).
    """
    ya, yb = _y_pair(sr, gt, crop_border)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation
    from numpy.lib.stride_tricks import sliding_window_view

    size = window.size
    rows = sliding_window_view(plane, size, axis=0) @ window
    return sliding_window_view(rows, size, axis=1) @ window


def ssim_y(sr, gt, crop_border: int = 0) -> float:
    """Mean local SSIM on luma with the standard 11x11 Gaussian window."""
    ya, yb = _y_pair(sr, gt, crop_border)
    if ya.shape[-2] < SSIM_WINDOW or ya.shape[-1] < SSIM_WINDOW:
        raise ShapeError(f"ssim_y needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after crop")
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    values = []
    for a, b in zip(ya, yb):
        mu_a = _filter_valid(a, window)
        mu_b = _filter_valid(b, window)
        aa = _filter_valid(a * a, window) - mu_a**2
        bb = _filter_valid(b * b, window) - mu_b**2
        ab = _filter_valid(a * b, window) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (aa + bb + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))
