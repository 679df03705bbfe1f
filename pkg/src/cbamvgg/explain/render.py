"""Heatmap rendering: colormaps, normalization, and base-image overlay.

Non-negative maps use a jet-like ramp; signed maps (relevances) use a
diverging blue-white-red ramp centered at zero with symmetric max-|value|
normalization. Overlay output is the equal blend 0.5*base + 0.5*color;
all arithmetic is integer-rounded the same way everywhere so output bytes
are deterministic.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..tensor import Array, require_finite

#: anchor colors (position, RGB in [0,1])
_JET_ANCHORS = ((0.0, (0.0, 0.0, 0.5)), (0.2, (0.0, 0.0, 1.0)),
                (0.4, (0.0, 1.0, 1.0)), (0.6, (1.0, 1.0, 0.0)),
                (0.8, (1.0, 0.0, 0.0)), (1.0, (0.5, 0.0, 0.0)))
_DIVERGING_ANCHORS = ((0.0, (0.13, 0.30, 0.89)), (0.5, (1.0, 1.0, 1.0)),
                      (1.0, (0.85, 0.10, 0.10)))


def _ramp(anchors, t: Array) -> Array:
    """Piecewise-linear RGB ramp over t in [0,1], shape t.shape + (3,)."""
    t = np.clip(t, 0.0, 1.0)
    out = np.zeros(t.shape + (3,), dtype=np.float64)
    for (p0, c0), (p1, c1) in zip(anchors[:-1], anchors[1:]):
        seg = (t >= p0) & (t <= p1)
        frac = np.where(p1 > p0, (t - p0) / (p1 - p0 if p1 > p0 else 1.0), 0.0)
        for ch in range(3):
            out[:, :, ch] = np.where(seg, c0[ch] + frac * (c1[ch] - c0[ch]),
                                     out[:, :, ch])
    return out


def normalize_map(values: Array, signed: bool) -> Array:
    """Map raw values to colormap positions in [0,1].

    Unsigned: min-max (identically-zero maps stay zero; constant positive
    maps saturate). Signed: symmetric max-|value| scaling so zero lands at
    the diverging ramp's center.
    """
    values = np.asarray(values, dtype=np.float64)
    require_finite("heatmap values", values)
    if signed:
        peak = float(np.abs(values).max())
        if peak == 0.0:
            return np.full_like(values, 0.5)
        return (values / peak + 1.0) / 2.0
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        return (values - lo) / (hi - lo)
    return np.ones_like(values) if hi > 0.0 else np.zeros_like(values)


def colormap(values01: Array, signed: bool = False) -> Array:
    """Positions in [0,1] -> uint8 RGB via the jet-like or diverging ramp."""
    anchors = _DIVERGING_ANCHORS if signed else _JET_ANCHORS
    rgb = _ramp(anchors, np.asarray(values01, dtype=np.float64))
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def render_heatmap(values: Array, base_image: Array | None = None,
                   mode: str = "overlay", signed: bool = False) -> Array:
    """Render an (H,W) map as uint8 RGB, optionally blended onto a base.

    overlay: floor(0.5*base + 0.5*color + 0.5) at the base's resolution
    (the map must already match it). raw: the colormapped map alone.
    """
    if mode not in ("overlay", "raw"):
        raise ShapeError(f"mode must be overlay or raw, got {mode!r}")
    color = colormap(normalize_map(values, signed), signed)
    if mode == "raw":
        return color
    if base_image is None:
        raise ShapeError("overlay mode needs a base image")
    base = np.asarray(base_image)
    if base.shape != color.shape:
        raise ShapeError(f"map {color.shape[:2]} does not match base "
                         f"{base.shape[:2]} after upsampling")
    blend = 0.5 * base.astype(np.float64) + 0.5 * color.astype(np.float64)
    return np.floor(blend + 0.5).astype(np.uint8)
