"""Hazy-image formation model and the priors hung off it.

The scattering composition I = J*T + A*(1-T) is differentiable end to end;
the airlight hint is a plain numpy preprocessing step computed once per
image before optimization starts.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import ShapeError

SATURATION_EPS = 1e-6
HINT_PATCH = 15
HINT_TOP_FRACTION = 0.001


def compose(radiance, transmission, airlight):
    """Blend radiance and airlight through the transmission map.

    All arguments are NCHW tensors; transmission has one channel and
    broadcasts across the color channels of the other two.
    """
    if radiance.shape != airlight.shape:
        raise ShapeError(f"radiance {radiance.shape} and airlight {airlight.shape} must match")
    if transmission.shape[0] != radiance.shape[0] or transmission.shape[2:] != radiance.shape[2:]:
        raise ShapeError(
            f"transmission {transmission.shape} does not align with radiance {radiance.shape}"
        )
    if transmission.shape[1] != 1:
        raise ShapeError(f"transmission must have 1 channel, got {transmission.shape}")
    return radiance * transmission + airlight * (1.0 - transmission)


def hsv_value(image):
    """Brightness plane: per-pixel max over the three color channels."""
    if image.shape[1] != 3:
        raise ShapeError(f"hsv_value expects 3 channels, got shape {image.shape}")
    return ag.channel_max(image)


def hsv_saturation(image, eps=SATURATION_EPS):
    """Saturation plane: (max - min) / (max + eps), branch-free in the graph."""
    if image.shape[1] != 3:
        raise ShapeError(f"hsv_saturation expects 3 channels, got shape {image.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    mx = ag.channel_max(image)
    mn = ag.channel_min(image)
    return (mx - mn) / (mx + eps)


def dark_channel(image, patch=HINT_PATCH):
    """Min over channels of a patch-wise min filter, replicate-padded.

    ``image`` is an HxWx3 array; the min filter is separable so rows and
    columns are reduced independently.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"dark_channel expects HxWx3, got {img.shape}")
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be odd and positive, got {patch}")
    r = patch // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    rows = np.lib.stride_tricks.sliding_window_view(padded, patch, axis=0).min(axis=-1)
    both = np.lib.stride_tricks.sliding_window_view(rows, patch, axis=1).min(axis=-1)
    return both.min(axis=2)


def estimate_airlight_hint(hazy, patch=HINT_PATCH, top_fraction=HINT_TOP_FRACTION):
    """Global airlight estimate: mean color of the brightest dark-channel pixels.

    Selects every pixel whose dark-channel value ties the k-th largest
    (k = ceil(top_fraction * pixels)); overlapping windows make exact ties
    common, and including them keeps the estimate independent of pixel
    storage order. Returns an rgb triple in [0,1]^3.
    """
    img = np.asarray(hazy, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ShapeError(f"expected a non-empty HxWx3 image, got shape {img.shape}")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    dark = dark_channel(img, patch=patch).ravel()
    k = math.ceil(top_fraction * dark.size)
    kth_largest = np.partition(dark, dark.size - k)[dark.size - k]
    selected = img.reshape(-1, 3)[dark >= kth_largest]
    return selected.mean(axis=0)
