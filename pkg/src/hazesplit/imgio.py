"""Image ingestion/emission and the padding needed by the airlight net."""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageIOError(RuntimeError):
    """Unreadable file or unsupported pixel format; message names the path."""


_CONVERTIBLE = {"RGB", "L", "LA", "P", "RGBA"}
_HIGH_DEPTH = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def load_image(path):
    """Read an 8-bit PNG/JPEG as HxWx3 float32 in [0,1] (v/255).

    Grayscale expands to three identical channels; 16-bit and float inputs
    are rejected.
    """
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as err:
        raise ImageIOError(f"cannot read image {path}: {err}") from err
    if img.mode in _HIGH_DEPTH:
        raise ImageIOError(f"unsupported bit depth (mode {img.mode}) in {path}; expected 8-bit")
    if img.mode not in _CONVERTIBLE:
        raise ImageIOError(f"unsupported image mode {img.mode} in {path}")
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr


def save_image_u8(arr, path):
    """Write an HxWx3 (or HxW) unit-interval array as an 8-bit PNG."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def save_gray16(arr, path):
    """Write an HxW (or HxWx1) unit-interval array as a 16-bit grayscale PNG."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel plane, got shape {arr.shape}")
    data = np.clip(np.rint(arr * 65535.0), 0, 65535).astype("<u2")
    Image.fromarray(data).save(path, format="PNG")


def load_gray16(path):
    """Read a 16-bit grayscale PNG back to HxW float64 in [0,1]."""
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as err:
        raise ImageIOError(f"cannot read image {path}: {err}") from err
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def pad_to_multiple(image, multiple=16):
    """Reflect-pad right/bottom so both spatial dims divide ``multiple``.

    Returns (padded, (h, w)) with the original dims for cropping back.
    """
    if multiple < 1:
        raise ValueError(f"multiple must be >= 1, got {multiple}")
    img = np.asarray(image)
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph >= h or pw >= w:
        raise ValueError(f"image {h}x{w} too small to reflect-pad to a multiple of {multiple}")
    if ph == 0 and pw == 0:
        return img, (h, w)
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect"), (h, w)


def crop_to(image, dims):
    """Undo pad_to_multiple."""
    h, w = dims
    return np.asarray(image)[:h, :w]
