"""Reconstruction quality metrics on 8-bit images: MSE, PSNR, SSIM.

SSIM uses uniform 8x8 windows (not the 11x11 Gaussian of the reference
implementation; desk-scale images are too small for that) with the standard
constants C1=(0.01*255)^2, C2=(0.03*255)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_WINDOW = 8
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    psnr: float   # dB; inf when images are identical
    ssim: float
    mse: float


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a.astype(np.float64), b.astype(np.float64)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / err)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    h, w, _ = a.shape
    if h < _WINDOW or w < _WINDOW:
        raise MetricError(f"image {h}x{w} smaller than the {_WINDOW}x{_WINDOW} SSIM window")
    wa = np.lib.stride_tricks.sliding_window_view(a, (_WINDOW, _WINDOW), axis=(0, 1))
    wb = np.lib.stride_tricks.sliding_window_view(b, (_WINDOW, _WINDOW), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def report(a: np.ndarray, b: np.ndarray) -> MetricReport:
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b), mse=mse(a, b))
