"""Image file I/O and resampling.

Reading is restricted to PNG and binary PPM, the two formats the loaders
accept; anything else is rejected up front rather than half-decoded.
Resampling is our own bilinear kernel (half-pixel centre convention with
edge clamping) so that resized activations and heatmaps are reproducible
to the bit across platforms.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .tensor import Array

_ALLOWED_FORMATS = {"PNG", "PPM"}


def read_image(path) -> Array:
    """Load a PNG or binary PPM as uint8 RGB with shape (H, W, 3)."""
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in _ALLOWED_FORMATS:
                raise DataError(f"{path}: format {fmt!r} not supported; "
                                f"use PNG or binary PPM")
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except UnidentifiedImageError:
        raise DataError(f"{path}: not a decodable image") from None
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"{path}: decoded to shape {arr.shape}, expected (H, W, 3)")
    return arr


def write_png(path, pixels: Array) -> None:
    """Write (H, W, 3) uint8 RGB pixels as a PNG."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise DataError(f"write_png expects (H, W, 3) uint8, got "
                        f"{pixels.shape} {pixels.dtype}")
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def bilinear_resize(image: Array, out_h: int, out_w: int) -> Array:
    """Bilinear resample of an (H, W) or (H, W, C) float array.

    Output pixel centres map to input coordinates via the half-pixel rule
    src = (dst + 0.5) * scale - 0.5, and samples outside the grid clamp to
    the nearest edge pixel. Identity when the size is unchanged.
    """
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        out = image.copy()
        return out[:, :, 0] if squeeze else out

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    # a + w*(b - a) rather than (1-w)*a + w*b: exact when a == b, so flat
    # regions (and 1x1 maps) stay bit-for-bit constant under resampling
    tl, tr = image[y0][:, x0], image[y0][:, x1]
    bl, br = image[y1][:, x0], image[y1][:, x1]
    top = tl + wx * (tr - tl)
    bot = bl + wx * (br - bl)
    out = top + wy * (bot - top)
    return out[:, :, 0] if squeeze else out
