"""Haze transfer: lift (transmission, airlight) from one image, re-apply to another."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio, solver

STYLE_META = "style.json"
STYLE_T = "transmission.png"
STYLE_A = "airlight.png"
STYLE_VERSION = 1


@dataclass
class HazeStyle:
    """The haze of one image: a transmission plane and an airlight plane."""

    transmission: np.ndarray  # HxWx1 in [0,1]
    airlight: np.ndarray  # HxWx3 in [0,1]

    def __post_init__(self):
        if self.transmission.shape[:2] != self.airlight.shape[:2]:
            raise ValueError(
                f"plane dims differ: {self.transmission.shape} vs {self.airlight.shape}"
            )


def extract_style(hazy, cfg=None):
    """Disentangle a hazy image and keep only its haze planes."""
    result, _ = solver.dehaze(hazy, cfg)
    return HazeStyle(transmission=result.transmission, airlight=result.airlight)


def bilinear_resize(plane, out_h, out_w):
    """Corner-aligned bilinear resampling of an HxWxC plane."""
    plane = np.asarray(plane, dtype=np.float64)
    squeeze = plane.ndim == 2
    if squeeze:
        plane = plane[..., None]
    h, w = plane.shape[:2]
    if (h, w) == (out_h, out_w):
        out = plane.copy()
        return out[..., 0] if squeeze else out

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=np.intp)
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(src.astype(np.intp), n_in - 2)
        return src - lo, lo

    fy, y0 = coords(h, out_h)
    fx, x0 = coords(w, out_w)
    tl = plane[y0][:, x0]
    tr = plane[y0][:, x0 + 1] if w > 1 else tl
    bl = plane[y0 + 1][:, x0] if h > 1 else tl
    br = plane[y0 + 1][:, x0 + 1] if h > 1 and w > 1 else tl
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = tl + fx * (tr - tl)
    bottom = bl + fx * (br - bl)
    out = top + fy * (bottom - top)
    return out[..., 0] if squeeze else out


def apply_style(clean, style, resize="bilinear"):
    """Synthesize a hazy version of a clean image from a stored haze style.

    Pure and deterministic: planes are resized to the target dims and
    composed through the scattering model.
    """
    if resize != "bilinear":
        raise ValueError(f"unsupported resize mode {resize!r}")
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 clean image, got {clean.shape}")
    h, w = clean.shape[:2]
    t = bilinear_resize(style.transmission, h, w)
    if t.ndim == 2:
        t = t[..., None]
    a = bilinear_resize(style.airlight, h, w)
    out = clean * t + a * (1.0 - t)
    return np.clip(out, 0.0, 1.0)


def save_style(style, directory):
    """Persist a style as 16-bit T, 8-bit A and a metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    imgio.save_gray16(style.transmission, directory / STYLE_T)
    imgio.save_image_u8(style.airlight, directory / STYLE_A)
    h, w = style.transmission.shape[:2]
    meta = {"version": STYLE_VERSION, "height": h, "width": w}
    (directory / STYLE_META).write_text(json.dumps(meta, indent=2) + "\n")


def load_style(directory):
    directory = Path(directory)
    meta = json.loads((directory / STYLE_META).read_text())
    if meta.get("version") != STYLE_VERSION:
        raise ValueError(f"unsupported style version {meta.get('version')} in {directory}")
    t = imgio.load_gray16(directory / STYLE_T)[..., None]
    a = imgio.load_image(directory / STYLE_A).astype(np.float64)
    return HazeStyle(transmission=t, airlight=a)


def synthesize(hazy_source, clean_target, cfg=None):
    """End-to-end transfer: extract the style of one image, apply to another."""
    style = extract_style(hazy_source, cfg)
    return apply_style(clean_target, style), style
