"""Image resampling and color-space helpers shared across the pipeline.

All images are (C, H, W) float arrays; sample positions use the
pixel-center convention (the center of pixel (row, col) sits at
coordinates y=row, x=col).  Out-of-frame samples read as zero.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(img, xs, ys):
    """Sample img (C,H,W) at float coords; zero outside. xs/ys same shape."""
    c, h, w = img.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out = np.zeros((c,) + xs.shape, dtype=img.dtype)
    for dy in (0, 1):
        wy = (1.0 - fy) if dy == 0 else fy
        yi = y0 + dy
        for dx in (0, 1):
            wx = (1.0 - fx) if dx == 0 else fx
            xi = x0 + dx
            weight = wx * wy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (weight != 0)
            if not inside.any():
                continue
            vals = img[:, yi.clip(0, h - 1), xi.clip(0, w - 1)]
            out += np.where(inside, weight, 0.0)[None] * np.where(inside[None], vals, 0.0)
    return out


def nearest_sample(img, xs, ys):
    """Nearest-neighbor sampling; zero outside the frame."""
    c, h, w = img.shape
    xi = np.rint(xs).astype(np.int64)
    yi = np.rint(ys).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    vals = img[:, yi.clip(0, h - 1), xi.clip(0, w - 1)]
    return np.where(inside[None], vals, 0).astype(img.dtype)


def _resize_grid(h_in, w_in, h_out, w_out):
    # align_corners=False convention
    sy = h_in / h_out
    sx = w_in / w_out
    ys = (np.arange(h_out) + 0.5) * sy - 0.5
    xs = (np.arange(w_out) + 0.5) * sx - 0.5
    return np.meshgrid(xs, ys)


def resize_bilinear(img, h_out, w_out):
    """Bilinear resize of a (C,H,W) image (edge-clamped, no zero bleed)."""
    c, h, w = img.shape
    if (h, w) == (h_out, w_out):
        return img.copy()
    xs, ys = _resize_grid(h, w, h_out, w_out)
    # clamp instead of zero-fill: resizing should not darken borders
    xs = xs.clip(0, w - 1)
    ys = ys.clip(0, h - 1)
    return bilinear_sample(img, xs, ys)


def resize_nearest(img, h_out, w_out):
    c, h, w = img.shape
    if (h, w) == (h_out, w_out):
        return img.copy()
    xs, ys = _resize_grid(h, w, h_out, w_out)
    return nearest_sample(img, xs.clip(0, w - 1), ys.clip(0, h - 1))


def affine_sample_coords(h, w, matrix):
    """Source coords for each output pixel under a 2x3 inverse map.

    matrix rows map output (x, y, 1) -> source (x, y).
    """
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    sx = matrix[0, 0] * xs + matrix[0, 1] * ys + matrix[0, 2]
    sy = matrix[1, 0] * xs + matrix[1, 1] * ys + matrix[1, 2]
    return sx, sy


def rgb_to_hsv(img):
    """(3,H,W) RGB in [0,1] -> HSV with hue in [0,1)."""
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    # hue sectors; where delta == 0 hue is undefined, report 0
    dsafe = np.where(delta > 0, delta, 1.0)
    hr = ((g - b) / dsafe) % 6.0
    hg = (b - r) / dsafe + 2.0
    hb = (r - g) / dsafe + 4.0
    h = np.where(maxc == r, hr, np.where(maxc == g, hg, hb))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(img):
    """(3,H,W) HSV (hue in [0,1)) -> RGB in [0,1]."""
    h, s, v = img[0] % 1.0, img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])
