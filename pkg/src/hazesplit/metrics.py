"""PSNR and single-scale SSIM on unit-interval images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_CONVENTION = "gaussian11-sigma1.5-valid-peak1"


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    convention: str = SSIM_CONVENTION


def _as_float(img):
    return np.asarray(img, dtype=np.float64)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b):
    """Peak signal-to-noise ratio between two unit-interval images.

    Parameters
    ----------
    a, b : array_like
        Images of identical shape with values in [0, 1].

    Returns
    -------
    float
        10*log10(1/MSE) in dB with the peak fixed at 1.0, or +inf when
        the images are identical (MSE = 0).
    """
    a, b = _as_float(a), _as_float(b)
    _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """1-D Gaussian taps normalized to sum 1 (the 2-D window is separable)."""
    half = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(xs**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img, taps):
    """Separable 'valid'-mode correlation of a 2-D array with taps x taps."""
    win = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(img, win, axis=0)
    rows = np.einsum("ijk,k->ij", rows, taps)
    cols = np.lib.stride_tricks.sliding_window_view(rows, win, axis=1)
    return np.einsum("ijk,k->ij", cols, taps)


def _ssim_channel(a, b, taps):
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a**2
    var_b = _filter_valid(b * b, taps) - mu_b**2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b):
    """Mean structural similarity index between two unit-interval images.

    Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
    C1 = 0.01^2, C2 = 0.03^2, evaluated on valid (fully interior) windows
    only, averaged over windows and then over channels.

    Parameters
    ----------
    a, b : array_like
        HxW or HxWxC images of identical shape, values in [0, 1], with
        min(H, W) >= 11.

    Returns
    -------
    float
        SSIM in [-1, 1]; 1.0 exactly for identical images.
    """
    a, b = _as_float(a), _as_float(b)
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC images, got shape {a.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], taps) for c in range(a.shape[2])]))


def evaluate(pred, ref):
    """Both metrics in one report."""
    return MetricReport(psnr_db=psnr(pred, ref), ssim=ssim(pred, ref))
